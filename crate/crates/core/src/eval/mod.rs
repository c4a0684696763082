//! Disorder ranking and top-k mean accuracy.
//!
//! Each test image is ranked against the gallery by aggregated cosine
//! distance. Gallery images are collapsed to disorders (by default a disorder
//! scores the distance of its nearest gallery image), disorders are sorted by
//! score, and a hit at `k` means the true disorder is among the first `k`.
//! The top-k mean accuracy averages per-class hit rates so every disorder
//! counts once, however many test images it has:
//!
//! ```text
//! mA_k = (1/C) * sum_c A_{k,c}
//! ```

mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cv::GalleryConfig;
use crate::embed::{EmbeddingSet, TtaTag, VariantKey};
use crate::ensemble::{self, AggregatedDistances, EnsembleError, MissingVariantPolicy, PreparedGallery, VariantIndex};

pub use report::{write_per_image_csv, write_report_json, EvaluationReport, ImageOutcome, ReportConfig};

/// The k values reported by default.
pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 30];

const TEST_TILE: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("EmptyGalleryAfterExclusion: no gallery image left for test image {test_image}")]
    EmptyGalleryAfterExclusion { test_image: String },
    #[error("aggregated distances cover {distances} gallery images but the gallery lists {entries}")]
    AlignmentMismatch { distances: usize, entries: usize },
    #[error("NoTestImages: {0}")]
    NoTestImages(String),
    #[error("invalid k list: {0}")]
    InvalidK(String),
    #[error("DimensionMismatch: test dimension {test}, gallery dimension {gallery}")]
    DimensionMismatch { test: usize, gallery: usize },
    #[error("gallery entry {0} has an empty class id")]
    EmptyClass(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub image_id: String,
    pub subject_id: String,
    pub class_id: String,
}

/// How gallery images of one disorder are reduced to a disorder score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CollapseRule {
    /// Distance of the disorder's nearest gallery image.
    #[default]
    Nearest,
    /// Mean distance of the disorder's `k` nearest gallery images (all of
    /// them when the disorder has fewer).
    MeanOfNearest { k: usize },
}

/// Disorders ordered by ascending score for one test image.
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderRanking {
    pub test_image_id: String,
    pub entries: Vec<(String, f64)>,
}

impl DisorderRanking {
    /// 1-based rank of `class_id`, if ranked.
    pub fn rank_of(&self, class_id: &str) -> Option<usize> {
        self.entries.iter().position(|(c, _)| c == class_id).map(|p| p + 1)
    }
}

/// Gallery metadata interned for fast per-test-image collapsing. Class
/// indices follow lexicographic class order, so index order is the tie-break.
#[derive(Debug, Clone)]
pub(crate) struct GalleryClasses {
    names: Vec<String>,
    class_of: Vec<u32>,
    subject_of: Vec<u32>,
    subjects: HashMap<String, u32>,
}

impl GalleryClasses {
    pub(crate) fn new<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Result<Self, EvalError> {
        let entries: Vec<(&str, &str, &str)> = entries.into_iter().collect();
        let mut names: Vec<String> = entries.iter().map(|e| e.2.to_string()).collect();
        names.sort();
        names.dedup();
        let class_index: HashMap<&str, u32> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), i as u32)).collect();
        let mut subjects = HashMap::new();
        let mut class_of = Vec::with_capacity(entries.len());
        let mut subject_of = Vec::with_capacity(entries.len());
        for &(image, subject, class) in &entries {
            if class.is_empty() {
                return Err(EvalError::EmptyClass(image.to_string()));
            }
            class_of.push(class_index[class]);
            let next = subjects.len() as u32;
            subject_of.push(*subjects.entry(subject.to_string()).or_insert(next));
        }
        Ok(Self { names, class_of, subject_of, subjects })
    }

    fn from_entries(gallery: &[GalleryEntry]) -> Result<Self, EvalError> {
        Self::new(gallery.iter().map(|e| (e.image_id.as_str(), e.subject_id.as_str(), e.class_id.as_str())))
    }

    fn from_index(index: &VariantIndex) -> Result<Self, EvalError> {
        Self::new(
            index
                .images()
                .iter()
                .map(|img| (img.image_id.as_str(), img.subject_id.as_str(), img.class_id.as_str())),
        )
    }

    pub(crate) fn contains_class(&self, class_id: &str) -> bool {
        self.names.binary_search_by(|n| n.as_str().cmp(class_id)).is_ok()
    }

    /// Ranked `(class index, score)` pairs; `None` when every gallery image is
    /// excluded.
    pub(crate) fn rank(&self, values: &[f64], exclude_subject: Option<&str>, rule: CollapseRule) -> Option<Vec<(u32, f64)>> {
        let excluded = exclude_subject.and_then(|s| self.subjects.get(s)).copied();
        let mut ranked: Vec<(u32, f64)> = match rule {
            CollapseRule::Nearest => {
                let mut best = vec![f64::INFINITY; self.names.len()];
                for ((&class, &subject), &d) in self.class_of.iter().zip(&self.subject_of).zip(values) {
                    if Some(subject) != excluded && d < best[class as usize] {
                        best[class as usize] = d;
                    }
                }
                best.into_iter()
                    .enumerate()
                    .filter(|(_, s)| s.is_finite())
                    .map(|(c, s)| (c as u32, s))
                    .collect()
            }
            CollapseRule::MeanOfNearest { k } => {
                let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); self.names.len()];
                for ((&class, &subject), &d) in self.class_of.iter().zip(&self.subject_of).zip(values) {
                    if Some(subject) != excluded {
                        per_class[class as usize].push(d);
                    }
                }
                per_class
                    .into_iter()
                    .enumerate()
                    .filter(|(_, ds)| !ds.is_empty())
                    .map(|(c, mut ds)| {
                        ds.sort_by(f64::total_cmp);
                        ds.truncate(k.max(1));
                        let mut sum = 0.0;
                        for d in &ds {
                            sum += d;
                        }
                        (c as u32, sum / ds.len() as f64)
                    })
                    .collect()
            }
        };
        if ranked.is_empty() {
            return None;
        }
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Some(ranked)
    }

    pub(crate) fn name(&self, class: u32) -> &str {
        &self.names[class as usize]
    }
}

/// Ranks disorders for one test image using the nearest-image rule.
///
/// Gallery images of `exclude_subject` are dropped before scoring. Ties are
/// broken by ascending class id.
pub fn collapse_to_disorders(
    agg: &AggregatedDistances,
    gallery: &[GalleryEntry],
    exclude_subject: Option<&str>,
) -> Result<DisorderRanking, EvalError> {
    collapse_with_rule(agg, gallery, exclude_subject, CollapseRule::Nearest)
}

pub fn collapse_with_rule(
    agg: &AggregatedDistances,
    gallery: &[GalleryEntry],
    exclude_subject: Option<&str>,
    rule: CollapseRule,
) -> Result<DisorderRanking, EvalError> {
    if agg.values.len() != gallery.len() {
        return Err(EvalError::AlignmentMismatch { distances: agg.values.len(), entries: gallery.len() });
    }
    let classes = GalleryClasses::from_entries(gallery)?;
    let ranked = classes
        .rank(&agg.values, exclude_subject, rule)
        .ok_or_else(|| EvalError::EmptyGalleryAfterExclusion { test_image: agg.test_image_id.clone() })?;
    Ok(DisorderRanking {
        test_image_id: agg.test_image_id.clone(),
        entries: ranked.into_iter().map(|(c, s)| (classes.name(c).to_string(), s)).collect(),
    })
}

/// Whether `true_class` is among the first `k` ranked disorders.
pub fn topk_hit(ranking: &DisorderRanking, true_class: &str, k: usize) -> bool {
    ranking.entries.iter().take(k).any(|(c, _)| c == true_class)
}

/// Per-class hit rates `A_{k,c}`.
pub fn class_accuracies(hits: &BTreeMap<String, Vec<bool>>) -> Result<BTreeMap<String, f64>, EvalError> {
    if hits.is_empty() {
        return Err(EvalError::NoTestImages("no classes".into()));
    }
    hits.iter()
        .map(|(class, h)| {
            if h.is_empty() {
                return Err(EvalError::NoTestImages(format!("class {class} has no test images")));
            }
            let n_hit = h.iter().filter(|&&x| x).count();
            Ok((class.clone(), n_hit as f64 / h.len() as f64))
        })
        .collect()
}

fn mean_of(accuracies: &BTreeMap<String, f64>) -> f64 {
    let mut sum = 0.0;
    for a in accuracies.values() {
        sum += a;
    }
    sum / accuracies.len() as f64
}

/// Top-k mean accuracy for one k: the unweighted mean of per-class hit rates.
pub fn mean_accuracy(hits: &BTreeMap<String, Vec<bool>>) -> Result<f64, EvalError> {
    Ok(mean_of(&class_accuracies(hits)?))
}

/// Inputs to [`evaluate`] besides the gallery configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Declared channels; empty means every variant found in the test set.
    #[serde(default)]
    pub variants: Vec<VariantKey>,
    #[serde(default)]
    pub policy: MissingVariantPolicy,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub collapse: CollapseRule,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_ks() -> Vec<usize> {
    DEFAULT_KS.to_vec()
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            variants: Vec::new(),
            policy: MissingVariantPolicy::Strict,
            ks: default_ks(),
            collapse: CollapseRule::Nearest,
            seed: None,
        }
    }
}

/// Every (model, tag) pair present in `set`, models in lexicographic order.
pub fn infer_variants(set: &EmbeddingSet) -> Vec<VariantKey> {
    let present: BTreeSet<VariantKey> = set.records.iter().map(|r| r.variant()).collect();
    present.into_iter().collect()
}

/// `options` with an empty variant list replaced by the variants of `test`.
pub fn resolve_options(test: &EmbeddingSet, options: &EvalOptions) -> EvalOptions {
    let mut resolved = options.clone();
    if resolved.variants.is_empty() {
        resolved.variants = infer_variants(test);
    }
    resolved
}

/// The twelve-channel declaration for the given models.
pub fn full_variants<S: AsRef<str>>(models: &[S]) -> Vec<VariantKey> {
    VariantKey::product(models, &TtaTag::ALL)
}

pub(crate) fn normalized_ks(ks: &[usize]) -> Result<Vec<usize>, EvalError> {
    if ks.is_empty() {
        return Err(EvalError::InvalidK("empty".into()));
    }
    if ks.contains(&0) {
        return Err(EvalError::InvalidK("k must be at least 1".into()));
    }
    let mut out = ks.to_vec();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Ranks every test image against the gallery, without summarizing.
pub fn score_images(
    test: &EmbeddingSet,
    gallery: &EmbeddingSet,
    config: &GalleryConfig,
    options: &EvalOptions,
) -> Result<Vec<ImageOutcome>, EvalError> {
    if test.dimension != gallery.dimension {
        return Err(EvalError::DimensionMismatch { test: test.dimension, gallery: gallery.dimension });
    }
    let variants = if options.variants.is_empty() { infer_variants(test) } else { options.variants.clone() };
    // Records of undeclared channels are left out, so a declaration selects
    // channels from a larger set.
    let declared: BTreeSet<VariantKey> = variants.iter().cloned().collect();
    let select = |set: &EmbeddingSet| -> Result<VariantIndex, EnsembleError> {
        let keep = |r: &crate::embed::EmbeddingRecord| declared.contains(&r.variant());
        if set.records.iter().all(keep) {
            ensemble::group_variants(set, &variants)
        } else {
            ensemble::group_variants(&set.filtered(keep), &variants)
        }
    };
    let test_index = select(test)?;
    let gallery_index = select(gallery)?;
    score_indexed(&test_index, &gallery_index, config.exclusion, options)
}

pub(crate) fn score_indexed(
    test: &VariantIndex,
    gallery: &VariantIndex,
    exclusion: bool,
    options: &EvalOptions,
) -> Result<Vec<ImageOutcome>, EvalError> {
    let prepared = PreparedGallery::new(gallery, options.policy)?;
    let classes = GalleryClasses::from_index(gallery)?;
    let positions: Vec<usize> = (0..test.len()).collect();
    let tiles = positions
        .par_chunks(TEST_TILE)
        .map(|tile| -> Result<Vec<ImageOutcome>, EvalError> {
            let aggs = prepared.aggregate(test, tile)?;
            tile.iter()
                .zip(aggs)
                .map(|(&t, agg)| {
                    let img = &test.images()[t];
                    let exclude = exclusion.then_some(img.subject_id.as_str());
                    let ranked = classes.rank(&agg.values, exclude, options.collapse).ok_or_else(|| {
                        EvalError::EmptyGalleryAfterExclusion { test_image: img.image_id.clone() }
                    })?;
                    let rank_of_truth = ranked
                        .iter()
                        .position(|&(c, _)| classes.name(c) == img.class_id)
                        .map(|p| p + 1);
                    let (top_class, top_score) = ranked[0];
                    Ok(ImageOutcome {
                        image_id: img.image_id.clone(),
                        subject_id: img.subject_id.clone(),
                        true_class: img.class_id.clone(),
                        rank_of_truth,
                        top1_class: classes.name(top_class).to_string(),
                        top1_score: top_score,
                        truth_in_gallery: classes.contains_class(&img.class_id),
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tiles.into_iter().flatten().collect())
}

/// Builds a report from ranked test images. Classes are those with at least
/// one test image.
pub fn summarize(outcomes: Vec<ImageOutcome>, ks: &[usize], config: ReportConfig) -> Result<EvaluationReport, EvalError> {
    let ks = normalized_ks(ks)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut absent = BTreeSet::new();
    for o in &outcomes {
        *counts.entry(o.true_class.clone()).or_default() += 1;
        if !o.truth_in_gallery {
            absent.insert(o.true_class.clone());
        }
    }
    if counts.is_empty() {
        return Err(EvalError::NoTestImages("the test set is empty".into()));
    }

    let mut per_k = BTreeMap::new();
    let mut per_class: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for &k in &ks {
        let mut hits: BTreeMap<String, Vec<bool>> = BTreeMap::new();
        for o in &outcomes {
            hits.entry(o.true_class.clone()).or_default().push(o.hit_at(k));
        }
        let accuracies = class_accuracies(&hits)?;
        per_k.insert(k, mean_of(&accuracies));
        for (class, a) in accuracies {
            per_class.entry(class).or_default().insert(k, a);
        }
    }

    let seed = config.seed;
    Ok(EvaluationReport {
        config,
        per_k,
        per_class,
        counts,
        classes_absent_from_gallery: absent.into_iter().collect(),
        seed,
        tool_version: crate::TOOL_VERSION.to_string(),
        images: outcomes,
    })
}

/// Full pipeline: aggregate, collapse, hit test and top-k mean accuracy for
/// every k in `options.ks`.
pub fn evaluate(
    test: &EmbeddingSet,
    gallery: &EmbeddingSet,
    config: &GalleryConfig,
    options: &EvalOptions,
) -> Result<EvaluationReport, EvalError> {
    let ks = normalized_ks(&options.ks)?;
    let options = resolve_options(test, options);
    let outcomes = score_images(test, gallery, config, &options)?;
    summarize(outcomes, &ks, ReportConfig::new(config, &options))
}
