use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::{CollapseRule, EvalOptions};
use crate::cv::GalleryConfig;
use crate::embed::format_value;
use crate::ensemble::MissingVariantPolicy;

/// Everything needed to rerun an evaluation, echoed into its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub gallery: GalleryConfig,
    pub variants: Vec<String>,
    pub policy: MissingVariantPolicy,
    pub ks: Vec<usize>,
    pub collapse: CollapseRule,
    pub seed: Option<u64>,
    /// Run-level settings such as fold count or training defaults.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ReportConfig {
    pub fn new(gallery: &GalleryConfig, options: &EvalOptions) -> Self {
        Self {
            gallery: *gallery,
            variants: options.variants.iter().map(|v| v.to_string()).collect(),
            policy: options.policy,
            ks: super::normalized_ks(&options.ks).unwrap_or_else(|_| options.ks.clone()),
            collapse: options.collapse,
            seed: options.seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_extra(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }
}

/// Ranking result for one test image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome {
    pub image_id: String,
    pub subject_id: String,
    pub true_class: String,
    /// 1-based rank of the true disorder; `None` when it was not ranked.
    pub rank_of_truth: Option<usize>,
    pub top1_class: String,
    pub top1_score: f64,
    /// Whether the gallery holds the true disorder at all, before exclusion.
    pub truth_in_gallery: bool,
}

impl ImageOutcome {
    pub fn hit_at(&self, k: usize) -> bool {
        self.rank_of_truth.is_some_and(|r| r <= k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: ReportConfig,
    /// `mA_k` per k.
    pub per_k: BTreeMap<usize, f64>,
    /// `A_{k,c}` per class and k.
    pub per_class: BTreeMap<String, BTreeMap<usize, f64>>,
    /// Test images per class.
    pub counts: BTreeMap<String, usize>,
    /// Classes with test images but no gallery image.
    pub classes_absent_from_gallery: Vec<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    #[serde(skip)]
    pub images: Vec<ImageOutcome>,
}

impl EvaluationReport {
    pub fn mean_accuracy(&self, k: usize) -> Option<f64> {
        self.per_k.get(&k).copied()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn write_report_json<W: Write>(report: &EvaluationReport, mut out: W) -> io::Result<()> {
    out.write_all(report.to_json().as_bytes())
}

/// `image_id,true_class,rank_of_truth,top1_class,top1_score`; an unranked
/// truth leaves `rank_of_truth` empty.
pub fn write_per_image_csv<W: Write>(report: &EvaluationReport, out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "true_class", "rank_of_truth", "top1_class", "top1_score"])?;
    for o in &report.images {
        let rank = o.rank_of_truth.map(|r| r.to_string()).unwrap_or_default();
        let score = format_value(o.top1_score);
        w.write_record([
            o.image_id.as_str(),
            o.true_class.as_str(),
            rank.as_str(),
            o.top1_class.as_str(),
            score.as_str(),
        ])?;
    }
    w.flush()
}
