//! Gallery configurations and subject-level cross-validation.
//!
//! Three gallery layouts are supported: frequent (seen disorders; the
//! training split is the gallery and the test split is probed), rare
//! cross-validation (unseen disorders; one fold of subjects is probed
//! against the others) and unified (frequent training images plus the
//! non-held rare folds). Folds are assigned per subject, never per image,
//! so a patient is never matched against their own other photos.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingSet};
use crate::eval::{self, EvalError, EvalOptions, EvaluationReport, ReportConfig};

#[derive(Debug, Error)]
pub enum CvError {
    #[error("SingletonClass: class {class} has {subjects} subject(s), at least 2 are required")]
    SingletonClass { class: String, subjects: usize },
    #[error("subject {subject} appears in classes {first} and {second}")]
    DuplicateSubject { subject: String, first: String, second: String },
    #[error("need at least 2 folds, got {0}")]
    InvalidFoldCount(usize),
    #[error("held fold {held} out of range for {n_folds} folds")]
    HeldFoldOutOfRange { held: usize, n_folds: usize },
    #[error("invalid gallery configuration: {0}")]
    ConfigInvalid(String),
    #[error("EmptyFold: fold {fold} has no test images")]
    EmptyFold { fold: usize },
    #[error("SplitMetadataMissing: {0}")]
    SplitMetadataMissing(String),
    #[error("subject {subject} has images in folds {first} and {second}")]
    InconsistentFold { subject: String, first: usize, second: usize },
    #[error("malformed split file at line {line}: {reason}")]
    MalformedSplitFile { line: usize, reason: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Split label of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    Fold(usize),
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
            Split::Test => f.write_str("test"),
            Split::Fold(i) => write!(f, "fold{i}"),
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => other
                .strip_prefix("fold")
                .and_then(|n| if n.is_empty() || n.starts_with('+') { None } else { n.parse().ok() })
                .map(Split::Fold)
                .ok_or_else(|| format!("unknown split {other:?}")),
        }
    }
}

/// Image id to split label. Serialized as CSV `image_id,split`, sorted by
/// image id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitTable {
    labels: BTreeMap<String, Split>,
}

impl SplitTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, split: Split) -> Option<Split> {
        self.labels.insert(image_id.into(), split)
    }

    pub fn get(&self, image_id: &str) -> Option<Split> {
        self.labels.get(image_id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn parse<R: Read>(reader: R) -> Result<Self, CvError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| CvError::MalformedSplitFile { line: 1, reason: e.to_string() })?;
        if headers.iter().collect::<Vec<_>>() != ["image_id", "split"] {
            return Err(CvError::MalformedSplitFile { line: 1, reason: "header must be image_id,split".into() });
        }
        let mut table = SplitTable::new();
        for (i, row) in rdr.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| CvError::MalformedSplitFile { line, reason: e.to_string() })?;
            if row.len() != 2 {
                return Err(CvError::MalformedSplitFile { line, reason: "expected 2 columns".into() });
            }
            let split: Split = row[1].parse().map_err(|reason| CvError::MalformedSplitFile { line, reason })?;
            if table.insert(&row[0], split).is_some() {
                return Err(CvError::MalformedSplitFile { line, reason: format!("image {} listed twice", &row[0]) });
            }
        }
        Ok(table)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), CvError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| CvError::Io(e.into());
        w.write_record(["image_id", "split"]).map_err(io)?;
        for (image, split) in &self.labels {
            w.write_record([image.as_str(), &split.to_string()]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Subject to fold index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub seed: Option<u64>,
    folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.folds.get(subject_id).copied()
    }

    pub fn subjects_in(&self, fold: usize) -> Vec<&str> {
        self.folds.iter().filter(|(_, &f)| f == fold).map(|(s, _)| s.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.folds.iter().map(|(s, f)| (s.as_str(), *f))
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Reads subject folds from `fold<N>` image labels. All images of a
    /// subject must share a fold.
    pub fn from_splits(rare: &EmbeddingSet, splits: &SplitTable, n_folds: usize) -> Result<Self, CvError> {
        if n_folds < 2 {
            return Err(CvError::InvalidFoldCount(n_folds));
        }
        let mut folds = BTreeMap::new();
        for r in &rare.records {
            let fold = match splits.get(&r.image_id) {
                Some(Split::Fold(f)) if f < n_folds => f,
                Some(Split::Fold(f)) => return Err(CvError::HeldFoldOutOfRange { held: f, n_folds }),
                _ => return Err(CvError::SplitMetadataMissing(format!("image {} has no fold label", r.image_id))),
            };
            if let Some(&first) = folds.get(&r.subject_id) {
                if first != fold {
                    return Err(CvError::InconsistentFold { subject: r.subject_id.clone(), first, second: fold });
                }
            }
            folds.insert(r.subject_id.clone(), fold);
        }
        Ok(Self { n_folds, seed: None, folds })
    }
}

/// Distinct subjects per class, sorted.
pub fn subjects_by_class(set: &EmbeddingSet) -> BTreeMap<String, Vec<String>> {
    let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in &set.records {
        map.entry(r.class_id.clone()).or_default().insert(r.subject_id.clone());
    }
    map.into_iter().map(|(c, s)| (c, s.into_iter().collect())).collect()
}

/// Deals subjects to folds. Classes are visited in sorted order; each
/// class's subjects are shuffled by `seed` and dealt round-robin, continuing
/// from the fold where the previous class stopped. Every class with at least
/// two subjects therefore spans at least two folds, and per-class fold
/// occupancy differs by at most one.
pub fn assign_folds(
    subjects: &BTreeMap<String, Vec<String>>,
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment, CvError> {
    if n_folds < 2 {
        return Err(CvError::InvalidFoldCount(n_folds));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    let mut cursor = 0usize;
    for (class, members) in subjects {
        let mut members: Vec<&str> = members.iter().map(String::as_str).collect();
        members.sort_unstable();
        members.dedup();
        if members.len() < 2 {
            return Err(CvError::SingletonClass { class: class.clone(), subjects: members.len() });
        }
        for &s in &members {
            if let Some(first) = owner.insert(s, class) {
                return Err(CvError::DuplicateSubject {
                    subject: s.to_string(),
                    first: first.to_string(),
                    second: class.clone(),
                });
            }
        }
        members.shuffle(&mut rng);
        for s in members {
            folds.insert(s.to_string(), cursor % n_folds);
            cursor += 1;
        }
    }
    Ok(FoldAssignment { n_folds, seed: Some(seed), folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryMode {
    Frequent,
    RareCv,
    Unified,
}

impl FromStr for GalleryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frequent" => Ok(Self::Frequent),
            "rare_cv" => Ok(Self::RareCv),
            "unified" => Ok(Self::Unified),
            other => Err(format!("unknown gallery mode {other:?}")),
        }
    }
}

/// Which images are probed against a unified gallery.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnifiedTest {
    #[default]
    Rare,
    Frequent,
    Both,
}

impl FromStr for UnifiedTest {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rare" => Ok(Self::Rare),
            "frequent" => Ok(Self::Frequent),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown unified test set {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryConfig {
    pub mode: GalleryMode,
    pub held_fold: Option<usize>,
    /// Drop gallery images of the test image's own subject.
    pub exclusion: bool,
    #[serde(default)]
    pub unified_test: UnifiedTest,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        Self::frequent()
    }
}

impl GalleryConfig {
    pub fn frequent() -> Self {
        Self { mode: GalleryMode::Frequent, held_fold: None, exclusion: true, unified_test: UnifiedTest::Rare }
    }

    pub fn rare_cv(held_fold: usize) -> Self {
        Self { mode: GalleryMode::RareCv, held_fold: Some(held_fold), exclusion: true, unified_test: UnifiedTest::Rare }
    }

    pub fn unified(held_fold: usize, test: UnifiedTest) -> Self {
        Self { mode: GalleryMode::Unified, held_fold: Some(held_fold), exclusion: true, unified_test: test }
    }

    pub fn uses_folds(&self) -> bool {
        self.mode != GalleryMode::Frequent
    }

    pub fn validate(&self, n_folds: usize) -> Result<(), CvError> {
        match (self.uses_folds(), self.held_fold) {
            (false, Some(_)) => Err(CvError::ConfigInvalid("frequent mode takes no held fold".into())),
            (true, None) => Err(CvError::ConfigInvalid("cross-validated modes need a held fold".into())),
            (true, Some(held)) if held >= n_folds => Err(CvError::HeldFoldOutOfRange { held, n_folds }),
            _ => Ok(()),
        }
    }
}

/// The embedding sets and labels galleries are built from.
#[derive(Debug, Clone, Copy)]
pub struct Sources<'a> {
    pub frequent: &'a EmbeddingSet,
    pub splits: &'a SplitTable,
    pub rare: &'a EmbeddingSet,
}

/// Splits a combined set by label: train/val/test images are frequent,
/// fold-labelled images are rare.
pub fn partition_by_splits(set: &EmbeddingSet, splits: &SplitTable) -> Result<(EmbeddingSet, EmbeddingSet), CvError> {
    let mut frequent = EmbeddingSet { dimension: set.dimension, records: Vec::new(), metadata: set.metadata.clone() };
    let mut rare = frequent.clone();
    for r in &set.records {
        match splits.get(&r.image_id) {
            Some(Split::Fold(_)) => rare.records.push(r.clone()),
            Some(_) => frequent.records.push(r.clone()),
            None => return Err(CvError::SplitMetadataMissing(format!("image {} has no split label", r.image_id))),
        }
    }
    Ok((frequent, rare))
}

/// Returns `(gallery, test)` for `config`.
pub fn build_gallery(
    sources: Sources<'_>,
    folds: &FoldAssignment,
    config: &GalleryConfig,
) -> Result<(EmbeddingSet, EmbeddingSet), CvError> {
    config.validate(folds.n_folds)?;
    let uses_frequent = match config.mode {
        GalleryMode::Frequent | GalleryMode::Unified => true,
        GalleryMode::RareCv => false,
    };
    let uses_rare = config.uses_folds();
    let dimension = if uses_frequent { sources.frequent.dimension } else { sources.rare.dimension };
    if uses_frequent
        && uses_rare
        && !sources.rare.is_empty()
        && !sources.frequent.is_empty()
        && sources.rare.dimension != sources.frequent.dimension
    {
        return Err(EmbedError::DimensionMismatch {
            expected: sources.frequent.dimension,
            found: sources.rare.dimension,
        }
        .into());
    }

    let mut gallery = EmbeddingSet::new(dimension);
    let mut test = EmbeddingSet::new(dimension);
    let mut probe_frequent = false;
    let mut probe_rare = false;
    match config.mode {
        GalleryMode::Frequent => probe_frequent = true,
        GalleryMode::RareCv => probe_rare = true,
        GalleryMode::Unified => match config.unified_test {
            UnifiedTest::Rare => probe_rare = true,
            UnifiedTest::Frequent => probe_frequent = true,
            UnifiedTest::Both => {
                probe_rare = true;
                probe_frequent = true;
            }
        },
    }

    if uses_frequent {
        for r in &sources.frequent.records {
            match sources.splits.get(&r.image_id) {
                Some(Split::Train) => gallery.records.push(r.clone()),
                Some(Split::Test) if probe_frequent => test.records.push(r.clone()),
                Some(Split::Test | Split::Val) => {}
                Some(Split::Fold(_)) | None => {
                    return Err(CvError::SplitMetadataMissing(format!(
                        "frequent image {} has no train/val/test label",
                        r.image_id
                    )))
                }
            }
        }
    }
    if uses_rare {
        let held = config.held_fold.expect("validated");
        for r in &sources.rare.records {
            let fold = folds.fold_of(&r.subject_id).ok_or_else(|| {
                CvError::SplitMetadataMissing(format!("subject {} has no fold", r.subject_id))
            })?;
            if fold != held {
                gallery.records.push(r.clone());
            } else if probe_rare {
                test.records.push(r.clone());
            }
        }
    }
    if test.is_empty() {
        return Err(CvError::EmptyFold { fold: config.held_fold.unwrap_or(0) });
    }
    Ok((gallery, test))
}

/// Pooled and per-fold results of a cross-validation run.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub pooled: EvaluationReport,
    pub per_fold: Vec<EvaluationReport>,
}

/// Evaluates every held fold. Per-class hit rates are pooled over all folds
/// before averaging into the top-k mean accuracy.
pub fn run_cv(
    sources: Sources<'_>,
    folds: &FoldAssignment,
    base: &GalleryConfig,
    options: &EvalOptions,
) -> Result<CvReport, CvError> {
    if !base.uses_folds() {
        return Err(CvError::ConfigInvalid("cross-validation needs mode rare_cv or unified".into()));
    }
    let ks = eval::normalized_ks(&options.ks)?;
    let first = if sources.rare.is_empty() { sources.frequent } else { sources.rare };
    let options = eval::resolve_options(first, options);

    let per_fold = (0..folds.n_folds)
        .into_par_iter()
        .map(|fold| -> Result<(Vec<eval::ImageOutcome>, EvaluationReport), CvError> {
            let config = GalleryConfig { held_fold: Some(fold), ..*base };
            let (gallery, test) = build_gallery(sources, folds, &config)?;
            let outcomes = eval::score_images(&test, &gallery, &config, &options)?;
            let report = eval::summarize(outcomes.clone(), &ks, ReportConfig::new(&config, &options))?;
            Ok((outcomes, report))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let pooled_outcomes: Vec<eval::ImageOutcome> = per_fold.iter().flat_map(|(o, _)| o.iter().cloned()).collect();
    let pooled_config = ReportConfig::new(&GalleryConfig { held_fold: None, ..*base }, &options)
        .with_extra("n_folds", folds.n_folds)
        .with_extra("fold_level", "subject")
        .with_extra("pooling", "pooled_then_averaged");
    let mut pooled = eval::summarize(pooled_outcomes, &ks, pooled_config)?;
    if pooled.seed.is_none() {
        pooled.seed = folds.seed;
        pooled.config.seed = folds.seed;
    }
    Ok(CvReport { pooled, per_fold: per_fold.into_iter().map(|(_, r)| r).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{EmbeddingRecord, TtaTag};

    fn classes(n_classes: usize, per_class: usize) -> BTreeMap<String, Vec<String>> {
        (0..n_classes)
            .map(|c| (format!("C{c:02}"), (0..per_class).map(|s| format!("S{c:02}-{s}")).collect()))
            .collect()
    }

    fn set_from(subjects: &BTreeMap<String, Vec<String>>, images_per_subject: usize) -> EmbeddingSet {
        let mut set = EmbeddingSet::new(2);
        for (class, members) in subjects {
            for s in members {
                for i in 0..images_per_subject {
                    set.records.push(EmbeddingRecord {
                        image_id: format!("{s}-img{i}"),
                        subject_id: s.clone(),
                        class_id: class.clone(),
                        model_id: "m".into(),
                        tta_tag: TtaTag::Orig,
                        vector: vec![1.0, i as f32],
                    });
                }
            }
        }
        set
    }

    #[test]
    fn pairs_land_in_different_folds() {
        let subjects = classes(10, 2);
        let folds = assign_folds(&subjects, 10, 7).unwrap();
        for members in subjects.values() {
            assert_ne!(folds.fold_of(&members[0]), folds.fold_of(&members[1]));
        }
        for f in 0..10 {
            assert_eq!(folds.subjects_in(f).len(), 2);
        }
        assert_eq!(folds, assign_folds(&subjects, 10, 7).unwrap());
    }

    #[test]
    fn singleton_class_is_rejected() {
        let mut subjects = classes(2, 2);
        subjects.insert("lonely".into(), vec!["x".into()]);
        assert!(matches!(assign_folds(&subjects, 10, 1), Err(CvError::SingletonClass { .. })));
        assert!(matches!(assign_folds(&classes(2, 2), 1, 1), Err(CvError::InvalidFoldCount(1))));
    }

    #[test]
    fn shared_subject_is_rejected() {
        let mut subjects = classes(2, 2);
        subjects.get_mut("C01").unwrap().push("S00-0".into());
        assert!(matches!(assign_folds(&subjects, 2, 1), Err(CvError::DuplicateSubject { .. })));
    }

    #[test]
    fn rare_cv_counts() {
        let subjects = classes(10, 2);
        let rare = set_from(&subjects, 1);
        let folds = assign_folds(&subjects, 10, 3).unwrap();
        let empty = EmbeddingSet::new(2);
        let splits = SplitTable::new();
        let sources = Sources { frequent: &empty, splits: &splits, rare: &rare };
        let (gallery, test) = build_gallery(sources, &folds, &GalleryConfig::rare_cv(0)).unwrap();
        assert_eq!(gallery.len(), 18);
        assert_eq!(test.len(), 2);
        assert!(matches!(
            build_gallery(sources, &folds, &GalleryConfig::rare_cv(10)),
            Err(CvError::HeldFoldOutOfRange { held: 10, n_folds: 10 })
        ));
    }

    fn frequent_fixture() -> (EmbeddingSet, SplitTable) {
        let subjects = classes(3, 3);
        let set = set_from(&subjects, 1);
        let mut splits = SplitTable::new();
        for (i, r) in set.records.iter().enumerate() {
            let split = match i % 3 {
                0 => Split::Test,
                1 => Split::Val,
                _ => Split::Train,
            };
            splits.insert(&r.image_id, split);
        }
        (set, splits)
    }

    #[test]
    fn frequent_mode_uses_train_and_test_splits() {
        let (frequent, splits) = frequent_fixture();
        let rare = EmbeddingSet::new(2);
        let folds = assign_folds(&BTreeMap::new(), 10, 0).unwrap();
        let sources = Sources { frequent: &frequent, splits: &splits, rare: &rare };
        let (gallery, test) = build_gallery(sources, &folds, &GalleryConfig::frequent()).unwrap();
        assert_eq!((gallery.len(), test.len()), (3, 3));
        assert!(gallery.records.iter().all(|r| splits.get(&r.image_id) == Some(Split::Train)));
        assert!(test.records.iter().all(|r| splits.get(&r.image_id) == Some(Split::Test)));
    }

    #[test]
    fn unified_with_empty_rare_is_the_frequent_gallery() {
        let (frequent, splits) = frequent_fixture();
        let rare = EmbeddingSet::new(2);
        let folds = assign_folds(&BTreeMap::new(), 10, 0).unwrap();
        let sources = Sources { frequent: &frequent, splits: &splits, rare: &rare };
        let (freq_gallery, _) = build_gallery(sources, &folds, &GalleryConfig::frequent()).unwrap();
        let (gallery, test) =
            build_gallery(sources, &folds, &GalleryConfig::unified(0, UnifiedTest::Frequent)).unwrap();
        assert_eq!(gallery.records, freq_gallery.records);
        assert_eq!(test.len(), 3);
        assert!(matches!(
            build_gallery(sources, &folds, &GalleryConfig::unified(0, UnifiedTest::Rare)),
            Err(CvError::EmptyFold { fold: 0 })
        ));
    }

    #[test]
    fn missing_split_label_is_reported() {
        let (frequent, mut splits) = frequent_fixture();
        splits.labels.remove(&frequent.records[0].image_id);
        let rare = EmbeddingSet::new(2);
        let folds = assign_folds(&BTreeMap::new(), 10, 0).unwrap();
        let sources = Sources { frequent: &frequent, splits: &splits, rare: &rare };
        assert!(matches!(
            build_gallery(sources, &folds, &GalleryConfig::frequent()),
            Err(CvError::SplitMetadataMissing(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(GalleryConfig::frequent().validate(10).is_ok());
        let mut c = GalleryConfig::frequent();
        c.held_fold = Some(0);
        assert!(matches!(c.validate(10), Err(CvError::ConfigInvalid(_))));
        let mut c = GalleryConfig::rare_cv(0);
        c.held_fold = None;
        assert!(matches!(c.validate(10), Err(CvError::ConfigInvalid(_))));
    }

    #[test]
    fn split_file_round_trip_and_errors() {
        let mut t = SplitTable::new();
        t.insert("b", Split::Fold(9));
        t.insert("a", Split::Train);
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "image_id,split\na,train\nb,fold9\n");
        assert_eq!(SplitTable::parse(buf.as_slice()).unwrap(), t);
        for bad in ["id,split\na,train\n", "image_id,split\na,holdout\n", "image_id,split\na,train\na,val\n"] {
            assert!(SplitTable::parse(bad.as_bytes()).is_err(), "{bad}");
        }
    }

    #[test]
    fn folds_from_split_labels() {
        let subjects = classes(2, 2);
        let rare = set_from(&subjects, 2);
        let mut splits = SplitTable::new();
        for r in &rare.records {
            let fold = if r.subject_id.ends_with("-0") { 0 } else { 1 };
            splits.insert(&r.image_id, Split::Fold(fold));
        }
        let folds = FoldAssignment::from_splits(&rare, &splits, 2).unwrap();
        assert_eq!(folds.fold_of("S01-1"), Some(1));
        splits.insert("S01-1-img0", Split::Fold(0));
        assert!(matches!(
            FoldAssignment::from_splits(&rare, &splits, 2),
            Err(CvError::InconsistentFold { .. })
        ));
    }
}
