//! Desk-scale fine-tuning simulator.
//!
//! A frozen random linear "backbone" feeds a trainable linear feature layer
//! (no output normalization) and a linear classifier over the seen
//! disorders. Training uses class-weighted cross entropy, Adam updates,
//! dropout on the feature layer, L2 decay on the feature weights and the
//! plateau schedule on validation top-5 mean accuracy. The feature layer is
//! the encoder evaluated before and after training.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Dimension, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cv::{self, CvError, FoldAssignment, GalleryConfig, Split, SplitTable};
use crate::embed::{format_value, EmbeddingRecord, EmbeddingSet, TtaTag, VariantKey};
use crate::eval::{self, EvalError, EvalOptions, EvaluationReport, ReportConfig};
use crate::losses::{self, LossError, PlateauScheduler, SchedulerConfig};
use crate::seed::rng_for;
use crate::synth::SyntheticDataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("ConfigInvalid: {0}")]
    ConfigInvalid(String),
    #[error("NonFiniteLoss: epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("malformed model dump at line {line}: {reason}")]
    MalformedDump { line: usize, reason: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Cv(#[from] CvError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub scheduler: SchedulerConfig,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Dropout rate on the feature layer input; 0 disables it.
    pub dropout: f64,
    /// L2 decay on the feature layer weights (not its bias).
    pub weight_decay: f64,
    pub freeze_backbone: bool,
    /// Train on every test-time variant of a photo, not only `orig`.
    pub augment_with_variants: bool,
    pub seed: u64,
}

impl Default for TrainSimConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            scheduler: SchedulerConfig::default(),
            hidden_dim: 128,
            feature_dim: 128,
            dropout: 0.5,
            weight_decay: 5e-5,
            freeze_backbone: true,
            augment_with_variants: true,
            seed: 0,
        }
    }
}

impl TrainSimConfig {
    /// No dropout and no weight decay.
    pub fn unregularized(self) -> Self {
        Self { dropout: 0.0, weight_decay: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::ConfigInvalid(m.to_string()));
        let s = &self.scheduler;
        if !(s.factor > 1.0) {
            return fail("plateau factor must exceed 1");
        }
        if !(s.base_lr > 0.0) || !s.base_lr.is_finite() || !(s.floor >= 0.0) || !(s.delta >= 0.0) {
            return fail("learning rate, floor and delta must be non-negative and finite");
        }
        if s.patience == 0 {
            return fail("patience must be at least 1");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return fail("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.feature_dim == 0 {
            return fail("batch size and layer widths must be positive");
        }
        Ok(())
    }
}

/// Backbone, feature layer and classifier. Rows map outputs, columns inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimModel {
    pub backbone: Array2<f64>,
    pub feature_weight: Array2<f64>,
    pub feature_bias: Array1<f64>,
    pub classifier_weight: Array2<f64>,
    pub classifier_bias: Array1<f64>,
    pub classes: Vec<String>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

/// Random matrix with orthonormal rows (or columns, if taller than wide).
fn semi_orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = gaussian_matrix(rng, rows.min(cols), rows.max(cols), 1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let prev = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &prev);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    if rows > cols {
        m.reversed_axes()
    } else {
        m
    }
}

impl SimModel {
    /// Backbone and feature layer start as random semi-orthogonal maps, so
    /// the untrained encoder is close to distance preserving.
    pub fn init(input_dim: usize, classes: Vec<String>, config: &TrainSimConfig) -> Self {
        let mut rng = rng_for(config.seed, "trainsim/init");
        let (h, f) = (config.hidden_dim, config.feature_dim);
        let backbone = semi_orthogonal(&mut rng, h, input_dim);
        let feature_weight = semi_orthogonal(&mut rng, f, h);
        let classifier_weight = gaussian_matrix(&mut rng, classes.len(), f, (1.0 / f as f64).sqrt());
        Self {
            backbone,
            feature_weight,
            feature_bias: Array1::zeros(f),
            classifier_bias: Array1::zeros(classes.len()),
            classifier_weight,
            classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_weight.nrows()
    }

    fn hidden(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.backbone.t())
    }

    /// Feature-layer output for each row of `x`, without dropout.
    pub fn encode(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.hidden(x).dot(&self.feature_weight.t()) + &self.feature_bias
    }

    /// Re-embeds every record of `set` through the feature layer.
    pub fn encode_set(&self, set: &EmbeddingSet) -> EmbeddingSet {
        let x = to_matrix(set);
        let features = self.encode(x.view());
        let records = set
            .records
            .iter()
            .zip(features.rows())
            .map(|(r, f)| EmbeddingRecord { vector: f.iter().map(|&v| v as f32).collect(), ..r.clone() })
            .collect();
        let mut metadata = set.metadata.clone();
        metadata.insert("encoder".into(), "trainsim-feature-layer".into());
        EmbeddingSet { dimension: self.feature_dim(), records, metadata }
    }

    fn tensors(&self) -> [(&'static str, ArrayView2<'_, f64>); 5] {
        [
            ("backbone", self.backbone.view()),
            ("feature.weight", self.feature_weight.view()),
            ("feature.bias", self.feature_bias.view().insert_axis(Axis(0))),
            ("classifier.weight", self.classifier_weight.view()),
            ("classifier.bias", self.classifier_bias.view().insert_axis(Axis(0))),
        ]
    }

    /// Text dump: a `#classes=` line, then per tensor a
    /// `#tensor=<name>\tshape=<rows>x<cols>` line followed by its rows.
    pub fn write_dump<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = BufWriter::new(out);
        writeln!(w, "#classes={}", self.classes.join(","))?;
        for (name, t) in self.tensors() {
            writeln!(w, "#tensor={name}\tshape={}x{}", t.nrows(), t.ncols())?;
            for row in t.rows() {
                let line: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
                writeln!(w, "{}", line.join("\t"))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_dump<R: Read>(input: R) -> Result<Self, TrainError> {
        let bad = |line: usize, reason: &str| TrainError::MalformedDump { line, reason: reason.to_string() };
        let lines: Vec<String> = BufReader::new(input).lines().collect::<Result<_, _>>()?;
        let classes = lines
            .first()
            .and_then(|l| l.strip_prefix("#classes="))
            .ok_or_else(|| bad(1, "expected #classes="))?;
        let classes: Vec<String> = classes.split(',').filter(|c| !c.is_empty()).map(String::from).collect();
        let mut tensors: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        let mut i = 1;
        while i < lines.len() {
            let header = lines[i].strip_prefix("#tensor=").ok_or_else(|| bad(i + 1, "expected #tensor="))?;
            let (name, shape) = header.split_once("\tshape=").ok_or_else(|| bad(i + 1, "missing shape"))?;
            let (r, c) = shape.split_once('x').ok_or_else(|| bad(i + 1, "shape must be RxC"))?;
            let (r, c): (usize, usize) = match (r.parse(), c.parse()) {
                (Ok(r), Ok(c)) => (r, c),
                _ => return Err(bad(i + 1, "shape must be RxC")),
            };
            let mut values = Vec::with_capacity(r * c);
            for k in 0..r {
                let line = lines.get(i + 1 + k).ok_or_else(|| bad(i + 2 + k, "missing row"))?;
                let row: Vec<f64> = line
                    .split('\t')
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(i + 2 + k, "bad value"))?;
                if row.len() != c {
                    return Err(bad(i + 2 + k, "wrong row length"));
                }
                values.extend(row);
            }
            tensors.insert(name.to_string(), Array2::from_shape_vec((r, c), values).expect("sized"));
            i += 1 + r;
        }
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| bad(lines.len(), &format!("missing tensor {name}")));
        let model = Self {
            backbone: take("backbone")?,
            feature_weight: take("feature.weight")?,
            feature_bias: take("feature.bias")?.row(0).to_owned(),
            classifier_weight: take("classifier.weight")?,
            classifier_bias: take("classifier.bias")?.row(0).to_owned(),
            classes,
        };
        let consistent = model.feature_weight.ncols() == model.backbone.nrows()
            && model.feature_bias.len() == model.feature_weight.nrows()
            && model.classifier_weight.ncols() == model.feature_weight.nrows()
            && model.classifier_weight.nrows() == model.classes.len()
            && model.classifier_bias.len() == model.classes.len();
        if !consistent {
            return Err(bad(lines.len(), "tensor shapes do not chain"));
        }
        Ok(model)
    }
}

fn to_matrix(set: &EmbeddingSet) -> Array2<f64> {
    let mut x = Array2::zeros((set.len(), set.dimension));
    for (mut row, r) in x.rows_mut().into_iter().zip(&set.records) {
        row.iter_mut().zip(&r.vector).for_each(|(o, &v)| *o = f64::from(v));
    }
    x
}

/// Single-model inputs of a simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSimData {
    pub model_id: String,
    pub train: EmbeddingSet,
    pub val: EmbeddingSet,
    /// Seen disorders, probed against `train`.
    pub test: EmbeddingSet,
    /// Unseen disorders, evaluated by cross-validation over `unseen_folds`.
    pub unseen: EmbeddingSet,
    pub unseen_folds: FoldAssignment,
}

impl TrainSimData {
    pub fn from_sets(
        model_id: &str,
        frequent: &EmbeddingSet,
        splits: &SplitTable,
        rare: &EmbeddingSet,
        folds: &FoldAssignment,
    ) -> Result<Self, TrainError> {
        let of_model = |set: &EmbeddingSet| set.filtered(|r| r.model_id == model_id);
        let frequent = of_model(frequent);
        if frequent.is_empty() {
            return Err(TrainError::ConfigInvalid(format!("no frequent records for model {model_id}")));
        }
        let mut parts = [Vec::new(), Vec::new(), Vec::new()];
        for r in &frequent.records {
            match splits.get(&r.image_id) {
                Some(Split::Train) => parts[0].push(r.clone()),
                Some(Split::Val) => parts[1].push(r.clone()),
                Some(Split::Test) => parts[2].push(r.clone()),
                _ => return Err(CvError::SplitMetadataMissing(format!("image {} has no train/val/test label", r.image_id)).into()),
            }
        }
        let [train, val, test] =
            parts.map(|records| EmbeddingSet { dimension: frequent.dimension, records, metadata: frequent.metadata.clone() });
        Ok(Self { model_id: model_id.to_string(), train, val, test, unseen: of_model(rare), unseen_folds: folds.clone() })
    }

    pub fn from_dataset(dataset: &SyntheticDataset, model_id: &str) -> Result<Self, TrainError> {
        let (frequent, rare) = dataset.partitioned();
        Self::from_sets(model_id, &frequent, &dataset.splits, &rare, &dataset.folds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReports {
    pub seen: EvaluationReport,
    pub unseen: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top5_ma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub initial: SimModel,
    pub model: SimModel,
    pub before: PhaseReports,
    pub after: PhaseReports,
    pub log: Vec<EpochLog>,
    pub converged: bool,
}

pub fn write_log_csv<W: Write>(log: &[EpochLog], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| TrainError::Io(e.into());
    w.write_record(["epoch", "lr", "train_loss", "val_top5_mA"]).map_err(io)?;
    for e in log {
        w.write_record([e.epoch.to_string(), format_value(e.lr), format_value(e.train_loss), format_value(e.val_top5_ma)])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }

    fn step<D: Dimension>(&mut self, param: &mut ndarray::Array<f64, D>, grad: &ndarray::Array<f64, D>, lr: f64, t: i32) {
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let p = param.as_slice_mut().expect("contiguous");
        let g = grad.as_slice().expect("contiguous");
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

fn eval_options(model_id: &str, ks: Vec<usize>) -> EvalOptions {
    EvalOptions { variants: vec![VariantKey::new(model_id, TtaTag::Orig)], ks, ..Default::default() }
}

fn evaluate_phase(model: &SimModel, data: &TrainSimData, config: &TrainSimConfig) -> Result<PhaseReports, TrainError> {
    let options = eval_options(&data.model_id, eval::DEFAULT_KS.to_vec());
    let train = model.encode_set(&data.train);
    let test = model.encode_set(&data.test);
    let extra = serde_json::to_value(config).expect("config serializes");
    let mut seen = eval::evaluate(&test, &train, &GalleryConfig::frequent(), &options)?;
    seen.config.extra.insert("trainsim".into(), extra.clone());

    let unseen = model.encode_set(&data.unseen);
    let empty = EmbeddingSet::new(unseen.dimension);
    let no_splits = SplitTable::new();
    let sources = cv::Sources { frequent: &empty, splits: &no_splits, rare: &unseen };
    let mut unseen = cv::run_cv(sources, &data.unseen_folds, &GalleryConfig::rare_cv(0), &options)?.pooled;
    unseen.config.extra.insert("trainsim".into(), extra);
    Ok(PhaseReports { seen, unseen })
}

fn val_top5(model: &SimModel, data: &TrainSimData, train_enc: &EmbeddingSet) -> Result<f64, TrainError> {
    let options = eval_options(&data.model_id, vec![5]);
    let val = model.encode_set(&data.val);
    let outcomes = eval::score_images(&val, train_enc, &GalleryConfig::frequent(), &options)?;
    let report = eval::summarize(outcomes, &[5], ReportConfig::new(&GalleryConfig::frequent(), &options))?;
    Ok(report.per_k[&5])
}

/// Trains the feature layer and classifier on `data.train`, reporting seen
/// and unseen retrieval before and after.
pub fn train_sim(data: &TrainSimData, config: &TrainSimConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let train_rows = if config.augment_with_variants {
        data.train.clone()
    } else {
        data.train.filtered(|r| r.tta_tag == TtaTag::Orig)
    };
    let mut image_counts: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for r in &train_rows.records {
        image_counts.entry(r.class_id.clone()).or_default().insert(&r.image_id);
    }
    let freqs: BTreeMap<String, u64> = image_counts.iter().map(|(c, imgs)| (c.clone(), imgs.len() as u64)).collect();
    let class_weights = losses::wce_weights(&freqs)?;
    let classes: Vec<String> = class_weights.keys().cloned().collect();
    let weights: Vec<f64> = class_weights.values().copied().collect();
    let label_of: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let x = to_matrix(&train_rows);
    let labels: Vec<usize> = train_rows.records.iter().map(|r| label_of[r.class_id.as_str()]).collect();

    let initial = SimModel::init(data.train.dimension, classes, config);
    let before = evaluate_phase(&initial, data, config)?;
    let mut model = initial.clone();
    let mut scheduler = PlateauScheduler::new(config.scheduler);
    let mut log = Vec::new();

    let mut shuffle_rng = rng_for(config.seed, "trainsim/shuffle");
    let mut dropout_rng = rng_for(config.seed, "trainsim/dropout");
    let mut adam_backbone = Adam::new(model.backbone.len());
    let mut adam_fw = Adam::new(model.feature_weight.len());
    let mut adam_fb = Adam::new(model.feature_bias.len());
    let mut adam_cw = Adam::new(model.classifier_weight.len());
    let mut adam_cb = Adam::new(model.classifier_bias.len());
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let keep = 1.0 - config.dropout;
    let mut t = 0i32;

    for epoch in 1..=config.epochs {
        let lr = scheduler.lr();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let xb = x.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let h = model.hidden(xb.view());
            let mask = Array2::from_shape_simple_fn(h.raw_dim(), || {
                if config.dropout == 0.0 || dropout_rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }
            });
            let hd = &h * &mask;
            let f = hd.dot(&model.feature_weight.t()) + &model.feature_bias;
            let logits = f.dot(&model.classifier_weight.t()) + &model.classifier_bias;
            let out = losses::wce_loss(logits.view(), &yb, &weights)?;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            loss_sum += out.loss * idx.len() as f64;

            let g_logits = out.grad_input;
            let g_cw = g_logits.t().dot(&f);
            let g_cb = g_logits.sum_axis(Axis(0));
            let g_f = g_logits.dot(&model.classifier_weight);
            let mut g_fw = g_f.t().dot(&hd);
            g_fw.scaled_add(config.weight_decay, &model.feature_weight);
            let g_fb = g_f.sum_axis(Axis(0));
            let g_backbone = (!config.freeze_backbone).then(|| (g_f.dot(&model.feature_weight) * &mask).t().dot(&xb));

            t += 1;
            adam_cw.step(&mut model.classifier_weight, &g_cw, lr, t);
            adam_cb.step(&mut model.classifier_bias, &g_cb, lr, t);
            adam_fw.step(&mut model.feature_weight, &g_fw, lr, t);
            adam_fb.step(&mut model.feature_bias, &g_fb, lr, t);
            if let Some(g) = g_backbone {
                adam_backbone.step(&mut model.backbone, &g, lr, t);
            }
        }
        let train_enc = model.encode_set(&data.train);
        let val = val_top5(&model, data, &train_enc)?;
        log.push(EpochLog { epoch, lr, train_loss: loss_sum / x.nrows() as f64, val_top5_ma: val });
        scheduler.step(val);
        if scheduler.converged() {
            break;
        }
    }

    let after = if config.epochs == 0 { before.clone() } else { evaluate_phase(&model, data, config)? };
    Ok(TrainOutcome { initial, model, before, after, log, converged: scheduler.converged() })
}

/// Largest entry-wise absolute difference.
pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut worst = 0.0f64;
    Zip::from(a).and(b).for_each(|&x, &y| worst = worst.max((x - y).abs()));
    worst
}
