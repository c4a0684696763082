#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use phenomatch::cv::FoldAssignment;
use phenomatch::embed::{EmbeddingRecord, EmbeddingSet, TtaTag, VariantKey};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const KS: [usize; 4] = [1, 5, 10, 30];

pub fn record(image: &str, subject: &str, class: &str, variant: &VariantKey, vector: Vec<f32>) -> EmbeddingRecord {
    EmbeddingRecord {
        image_id: image.into(),
        subject_id: subject.into(),
        class_id: class.into(),
        model_id: variant.model_id.clone(),
        tta_tag: variant.tta_tag,
        vector,
    }
}

pub fn orig(model: &str) -> VariantKey {
    VariantKey::new(model, TtaTag::Orig)
}

/// Non-zero vector of small integers, so ties are common.
pub fn small_int_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f32).collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

/// A random single-variant instance: at most 8 gallery images, at most 5
/// classes, dimension at most 4. Subjects belong to one class and may appear
/// on both sides.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (EmbeddingSet, EmbeddingSet) {
    let dim = rng.random_range(1..=4);
    let n_classes = rng.random_range(1..=5);
    let n_subjects = rng.random_range(1..=8);
    let subject_class: Vec<usize> = (0..n_subjects).map(|_| rng.random_range(0..n_classes)).collect();
    let variant = orig("m1");
    let make = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| {
        let mut set = EmbeddingSet::new(dim);
        for i in 0..n {
            let s = rng.random_range(0..n_subjects);
            set.records.push(record(
                &format!("{prefix}{i}"),
                &format!("s{s}"),
                &format!("c{}", subject_class[s]),
                &variant,
                small_int_vector(rng, dim),
            ));
        }
        set
    };
    let n_gallery = rng.random_range(1..=8);
    let gallery = make("g", n_gallery, rng);
    let n_test = rng.random_range(1..=6);
    let test = make("t", n_test, rng);
    (test, gallery)
}

fn normalize(v: &[f32]) -> Vec<f64> {
    let mut sq = 0.0f64;
    for &x in v {
        sq += f64::from(x) * f64::from(x);
    }
    let norm = sq.sqrt();
    v.iter().map(|&x| f64::from(x) / norm).collect()
}

fn distance(u: &[f64], v: &[f64]) -> f64 {
    let mut d = 0.0;
    for (a, b) in u.iter().zip(v) {
        d += a * b;
    }
    (1.0 - d).clamp(0.0, 2.0)
}

struct Image {
    subject: String,
    class: String,
    channels: Vec<Vec<f64>>,
}

fn by_image(set: &EmbeddingSet, variants: &[VariantKey]) -> BTreeMap<String, Image> {
    let mut out: BTreeMap<String, Image> = BTreeMap::new();
    for r in &set.records {
        let Some(c) = variants.iter().position(|v| *v == r.variant()) else { continue };
        let img = out.entry(r.image_id.clone()).or_insert_with(|| Image {
            subject: r.subject_id.clone(),
            class: r.class_id.clone(),
            channels: vec![Vec::new(); variants.len()],
        });
        img.channels[c] = normalize(&r.vector);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleImage {
    pub image_id: String,
    pub class: String,
    pub rank_of_truth: Option<usize>,
    pub top1_class: String,
    pub top1_score: f64,
}

/// Ranks every test image by hand. `None` when some test image is left with
/// an empty gallery after exclusion.
pub fn oracle_rank(
    test: &EmbeddingSet,
    gallery: &EmbeddingSet,
    variants: &[VariantKey],
    exclusion: bool,
) -> Option<Vec<OracleImage>> {
    let tests = by_image(test, variants);
    let galleries = by_image(gallery, variants);
    let mut out = Vec::new();
    for (id, t) in &tests {
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for g in galleries.values() {
            if exclusion && g.subject == t.subject {
                continue;
            }
            let (mut sum, mut lo, mut hi, mut n) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0u32);
            for (a, b) in t.channels.iter().zip(&g.channels) {
                if a.is_empty() || b.is_empty() {
                    continue;
                }
                let d = distance(a, b);
                sum += d;
                lo = lo.min(d);
                hi = hi.max(d);
                n += 1;
            }
            let d = (sum / f64::from(n)).clamp(lo, hi);
            let e = best.entry(g.class.as_str()).or_insert(f64::INFINITY);
            if d < *e {
                *e = d;
            }
        }
        if best.is_empty() {
            return None;
        }
        let mut ranked: Vec<(&str, f64)> = best.into_iter().collect();
        ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(b.0)));
        out.push(OracleImage {
            image_id: id.clone(),
            class: t.class.clone(),
            rank_of_truth: ranked.iter().position(|(c, _)| *c == t.class).map(|p| p + 1),
            top1_class: ranked[0].0.to_string(),
            top1_score: ranked[0].1,
        });
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub per_k: BTreeMap<usize, f64>,
    pub per_class: BTreeMap<String, BTreeMap<usize, f64>>,
    pub counts: BTreeMap<String, usize>,
}

pub fn oracle_summary(images: &[OracleImage], ks: &[usize]) -> OracleSummary {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for img in images {
        *counts.entry(img.class.clone()).or_default() += 1;
    }
    let mut per_k = BTreeMap::new();
    let mut per_class: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for &k in ks {
        let mut sum = 0.0;
        for (class, &n) in &counts {
            let hits = images
                .iter()
                .filter(|i| &i.class == class && i.rank_of_truth.is_some_and(|r| r <= k))
                .count();
            let a = hits as f64 / n as f64;
            per_class.entry(class.clone()).or_default().insert(k, a);
            sum += a;
        }
        per_k.insert(k, sum / counts.len() as f64);
    }
    OracleSummary { per_k, per_class, counts }
}

/// Replays every fold by hand: the held fold's subjects are tested against
/// every other subject, and hits are pooled per class before averaging.
pub fn oracle_cv(
    rare: &EmbeddingSet,
    folds: &FoldAssignment,
    variants: &[VariantKey],
    exclusion: bool,
    ks: &[usize],
) -> OracleSummary {
    let mut images = Vec::new();
    for f in 0..folds.n_folds {
        let held: BTreeSet<&str> = folds.subjects_in(f).into_iter().collect();
        let test = rare.filtered(|r| held.contains(r.subject_id.as_str()));
        let gallery = rare.filtered(|r| !held.contains(r.subject_id.as_str()));
        if test.is_empty() {
            continue;
        }
        images.extend(oracle_rank(&test, &gallery, variants, exclusion).expect("non-empty gallery"));
    }
    oracle_summary(&images, ks)
}

/// 10 classes of 2 subjects with 2 images each, three models and four tags.
pub fn twenty_subject_fixture(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingSet {
    let variants = VariantKey::product(&["m1", "m2", "m3"], &TtaTag::ALL);
    let mut set = EmbeddingSet::new(dim);
    for c in 0..10 {
        for s in 0..2 {
            for i in 0..2 {
                let image = format!("I{c}{s}{i}");
                for v in &variants {
                    let vector = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                    set.records.push(record(&image, &format!("P{c}{s}"), &format!("D{c}"), v, vector));
                }
            }
        }
    }
    set
}

/// Random class to subject map: 1..=12 classes of 2..=9 subjects.
pub fn random_subject_map(rng: &mut ChaCha8Rng) -> BTreeMap<String, Vec<String>> {
    let mut next = 0;
    (0..rng.random_range(1..=12))
        .map(|c| {
            let n = rng.random_range(2..=9);
            let subjects = (next..next + n).map(|s| format!("P{s:04}")).collect();
            next += n;
            (format!("D{c:02}"), subjects)
        })
        .collect()
}

/// One image per subject, so gallery checks can be made on records.
pub fn one_image_per_subject(subjects: &BTreeMap<String, Vec<String>>) -> EmbeddingSet {
    let v = orig("m1");
    let mut set = EmbeddingSet::new(2);
    for (class, members) in subjects {
        for (i, s) in members.iter().enumerate() {
            set.records.push(record(&format!("I{s}"), s, class, &v, vec![1.0, i as f32]));
        }
    }
    set
}

/// Partition, no-leakage and round-robin checks. Returns a description of
/// the first violation.
pub fn fold_violation(subjects: &BTreeMap<String, Vec<String>>, folds: &FoldAssignment) -> Option<String> {
    use phenomatch::cv::{build_gallery, CvError, GalleryConfig, Sources, SplitTable};

    let all: BTreeSet<&str> = subjects.values().flatten().map(String::as_str).collect();
    let assigned: BTreeSet<&str> = folds.iter().map(|(s, _)| s).collect();
    if all != assigned || folds.len() != all.len() {
        return Some("folds do not cover exactly the input subjects".into());
    }
    if let Some((s, f)) = folds.iter().find(|&(_, f)| f >= folds.n_folds) {
        return Some(format!("subject {s} in fold {f} of {}", folds.n_folds));
    }
    for (class, members) in subjects {
        let mut occupancy = vec![0usize; folds.n_folds];
        for s in members {
            occupancy[folds.fold_of(s).unwrap()] += 1;
        }
        let (lo, hi) = (occupancy.iter().min().unwrap(), occupancy.iter().max().unwrap());
        if hi - lo > 1 {
            return Some(format!("class {class} occupancy {occupancy:?}"));
        }
        if occupancy.iter().filter(|&&n| n > 0).count() < 2 {
            return Some(format!("class {class} sits in one fold"));
        }
    }

    let rare = one_image_per_subject(subjects);
    let frequent = EmbeddingSet::new(2);
    let splits = SplitTable::new();
    let sources = Sources { frequent: &frequent, splits: &splits, rare: &rare };
    let mut tested = BTreeSet::new();
    for f in 0..folds.n_folds {
        let held: BTreeSet<&str> = folds.subjects_in(f).into_iter().collect();
        match build_gallery(sources, folds, &GalleryConfig::rare_cv(f)) {
            Ok((gallery, test)) => {
                let g: BTreeSet<&str> = gallery.records.iter().map(|r| r.subject_id.as_str()).collect();
                let t: BTreeSet<&str> = test.records.iter().map(|r| r.subject_id.as_str()).collect();
                if !g.is_disjoint(&t) {
                    return Some(format!("fold {f} leaks subjects {:?}", g.intersection(&t).collect::<Vec<_>>()));
                }
                if t != held || g.len() + t.len() != all.len() {
                    return Some(format!("fold {f} does not split the subjects"));
                }
                for s in t {
                    if !tested.insert(s.to_string()) {
                        return Some(format!("subject {s} tested twice"));
                    }
                }
            }
            Err(CvError::EmptyFold { .. }) if held.is_empty() => {}
            Err(e) => return Some(format!("fold {f}: {e}")),
        }
    }
    if tested.len() != all.len() {
        return Some("not every subject was tested".into());
    }
    None
}
