//! Angular-margin and class-weighted softmax losses with analytic gradients.

pub mod gradcheck;
mod schedule;

pub use schedule::{PlateauScheduler, SchedulerConfig};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

pub const DEFAULT_SCALE: f64 = 64.0;
pub const DEFAULT_MARGIN: f64 = 0.5;
/// Cosines are clamped to `[-1 + COS_CLAMP, 1 - COS_CLAMP]` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("EmptyFrequencies: no classes given")]
    EmptyFrequencies,
    #[error("ZeroCount: class {0} has count 0")]
    ZeroCount(String),
    #[error("ZeroVector: {what} row {row} has zero norm")]
    ZeroVector { what: &'static str, row: usize },
    #[error("LabelOutOfRange: sample {sample} has label {label}, {classes} classes")]
    LabelOutOfRange { sample: usize, label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("NonFinite: value at coordinate {0:?} is not finite")]
    NonFinite(Option<usize>),
}

/// Per-class weights `0.5 * min(D) / D_c + 0.5`, evaluated as
/// `(min(D) + D_c) / (2 D_c)` so that each weight is a single rounding of the
/// exact value. The smallest classes get exactly 1.0; all weights lie in
/// (0.5, 1] for counts below 2^53.
pub fn wce_weights<K: Ord + Clone + ToString>(freqs: &BTreeMap<K, u64>) -> Result<BTreeMap<K, f64>, LossError> {
    if freqs.is_empty() {
        return Err(LossError::EmptyFrequencies);
    }
    if let Some((k, _)) = freqs.iter().find(|(_, &d)| d == 0) {
        return Err(LossError::ZeroCount(k.to_string()));
    }
    let min = *freqs.values().min().expect("non-empty") as f64;
    Ok(freqs.iter().map(|(k, &d)| (k.clone(), (min + d as f64) / (2.0 * d as f64))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceParams {
    pub s: f64,
    pub m: f64,
    /// Class weight vectors, one row per class. Normalized before use.
    pub weights: Array2<f64>,
}

impl ArcFaceParams {
    pub fn new(weights: Array2<f64>) -> Self {
        Self { s: DEFAULT_SCALE, m: DEFAULT_MARGIN, weights }
    }

    pub fn with_scale_margin(mut self, s: f64, m: f64) -> Self {
        self.s = s;
        self.m = m;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the inputs (embeddings or logits).
    pub grad_input: Array2<f64>,
    /// Gradient with respect to the class weights; empty for `wce_loss`.
    pub grad_weights: Array2<f64>,
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<(), LossError> {
    if labels.len() != n {
        return Err(LossError::Shape(format!("{} labels for {} samples", labels.len(), n)));
    }
    match labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        Some((sample, &label)) => Err(LossError::LabelOutOfRange { sample, label, classes }),
        None => Ok(()),
    }
}

fn row_norms(a: ArrayView2<f64>, what: &'static str) -> Result<Array1<f64>, LossError> {
    let norms: Array1<f64> = a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    match norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        Some(row) => Err(LossError::ZeroVector { what, row }),
        None => Ok(norms),
    }
}

/// Returns `log(sum(exp(z)))` and `softmax(z)` into `probs`.
fn log_softmax_into(z: ArrayView1<f64>, probs: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &v) in probs.iter_mut().zip(z) {
        *p = (v - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln()
}

/// Additive angular margin loss averaged over the batch, with gradients for
/// the raw (unnormalized) embeddings and class weights.
pub fn arcface_loss(embeddings: ArrayView2<f64>, labels: &[usize], params: &ArcFaceParams) -> Result<LossOutput, LossError> {
    let (n, d) = embeddings.dim();
    let (classes, wd) = params.weights.dim();
    if wd != d {
        return Err(LossError::Shape(format!("embeddings have dimension {d}, weights {wd}")));
    }
    if n == 0 || classes == 0 {
        return Err(LossError::Shape("empty batch or no classes".into()));
    }
    if !(params.s > 0.0) || !(0.0..std::f64::consts::PI).contains(&params.m) {
        return Err(LossError::InvalidParams(format!("s = {}, m = {}", params.s, params.m)));
    }
    check_labels(labels, n, classes)?;
    let x_norm = row_norms(embeddings, "embedding")?;
    let w_norm = row_norms(params.weights.view(), "weight")?;
    let x_hat = &embeddings / &x_norm.view().insert_axis(Axis(1));
    let w_hat = &params.weights / &w_norm.view().insert_axis(Axis(1));
    let cos = x_hat.dot(&w_hat.t());

    let (s, m) = (params.s, params.m);
    let lo = -1.0 + COS_CLAMP;
    let hi = 1.0 - COS_CLAMP;
    let mut loss = 0.0;
    // d loss / d cos, before the projections onto the sphere tangents.
    let mut g_cos = Array2::<f64>::zeros((n, classes));
    let mut z = Array1::<f64>::zeros(classes);
    let mut probs = vec![0.0; classes];
    for i in 0..n {
        let y = labels[i];
        let c_y = cos[[i, y]].clamp(lo, hi);
        let theta = c_y.acos();
        for j in 0..classes {
            z[j] = s * cos[[i, j]].clamp(lo, hi);
        }
        z[y] = s * (theta + m).cos();
        let lse = log_softmax_into(z.view(), &mut probs);
        loss += lse - z[y];
        for j in 0..classes {
            let dz = probs[j] - if j == y { 1.0 } else { 0.0 };
            let c = cos[[i, j]];
            let dz_dc = if c < lo || c > hi {
                0.0
            } else if j == y {
                s * (theta + m).sin() / theta.sin()
            } else {
                s
            };
            g_cos[[i, j]] = dz * dz_dc / n as f64;
        }
    }
    loss /= n as f64;

    // cos_ij = x̂_i·ŵ_j, so d cos / d x_i = (ŵ_j - cos_ij x̂_i) / |x_i|.
    let mut grad_x = g_cos.dot(&w_hat);
    let mut grad_w = g_cos.t().dot(&x_hat);
    for i in 0..n {
        let radial: f64 = (0..classes).map(|j| g_cos[[i, j]] * cos[[i, j]]).sum();
        let mut row = grad_x.row_mut(i);
        row.scaled_add(-radial, &x_hat.row(i));
        row /= x_norm[i];
    }
    for j in 0..classes {
        let radial: f64 = (0..n).map(|i| g_cos[[i, j]] * cos[[i, j]]).sum();
        let mut row = grad_w.row_mut(j);
        row.scaled_add(-radial, &w_hat.row(j));
        row /= w_norm[j];
    }
    Ok(LossOutput { loss, grad_input: grad_x, grad_weights: grad_w })
}

/// Softmax cross entropy with each sample scaled by the weight of its label,
/// averaged over the batch (not normalized by the weight sum).
pub fn wce_loss(logits: ArrayView2<f64>, labels: &[usize], weights: &[f64]) -> Result<LossOutput, LossError> {
    let (n, classes) = logits.dim();
    if weights.len() != classes {
        return Err(LossError::Shape(format!("{} weights for {classes} classes", weights.len())));
    }
    if n == 0 {
        return Err(LossError::Shape("empty batch".into()));
    }
    check_labels(labels, n, classes)?;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((n, classes));
    let mut probs = vec![0.0; classes];
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels[i];
        let w = weights[y];
        let lse = log_softmax_into(row, &mut probs);
        loss += w * (lse - row[y]);
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = w * (probs[j] - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok(LossOutput { loss: loss / n as f64, grad_input: grad, grad_weights: Array2::zeros((0, 0)) })
}

/// Compares an analytic gradient with central differences at `point`.
/// Returns `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &[f64], step: f64) -> Result<f64, LossError>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(step > 0.0) {
        return Err(LossError::InvalidParams(format!("step {step}")));
    }
    let (value, analytic) = f(point);
    if analytic.len() != point.len() {
        return Err(LossError::Shape(format!("gradient has {} entries for {} coordinates", analytic.len(), point.len())));
    }
    if !value.is_finite() {
        return Err(LossError::NonFinite(None));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x).0;
        x[i] = orig - step;
        let minus = f(&x).0;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(LossError::NonFinite(Some(i)));
        }
        worst = worst.max((analytic[i] - numeric).abs() / (numeric.abs() + 1e-8));
    }
    Ok(worst)
}

/// Gradient check of `arcface_loss` over embeddings and weights jointly.
pub fn check_arcface(embeddings: &Array2<f64>, labels: &[usize], params: &ArcFaceParams, step: f64) -> Result<f64, LossError> {
    arcface_loss(embeddings.view(), labels, params)?;
    let (n, d) = embeddings.dim();
    let split = n * d;
    let mut point: Vec<f64> = embeddings.iter().copied().collect();
    point.extend(params.weights.iter().copied());
    let classes = params.weights.nrows();
    finite_diff_check(
        |p| {
            let x = ArrayView2::from_shape((n, d), &p[..split]).expect("shape");
            let w = Array2::from_shape_vec((classes, d), p[split..].to_vec()).expect("shape");
            let local = ArcFaceParams { weights: w, ..params.clone() };
            match arcface_loss(x, labels, &local) {
                Ok(out) => (out.loss, out.grad_input.iter().chain(out.grad_weights.iter()).copied().collect()),
                Err(_) => (f64::NAN, vec![f64::NAN; p.len()]),
            }
        },
        &point,
        step,
    )
}

/// Gradient check of `wce_loss` over the logits.
pub fn check_wce(logits: &Array2<f64>, labels: &[usize], weights: &[f64], step: f64) -> Result<f64, LossError> {
    wce_loss(logits.view(), labels, weights)?;
    let shape = logits.dim();
    let point: Vec<f64> = logits.iter().copied().collect();
    finite_diff_check(
        |p| {
            let z = ArrayView2::from_shape(shape, p).expect("shape");
            match wce_loss(z, labels, weights) {
                Ok(out) => (out.loss, out.grad_input.iter().copied().collect()),
                Err(_) => (f64::NAN, vec![f64::NAN; p.len()]),
            }
        },
        &point,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn freqs(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn weight_examples() {
        let w = wce_weights(&freqs(&[("a", 10), ("b", 10)])).unwrap();
        assert_eq!(w.values().copied().collect::<Vec<_>>(), [1.0, 1.0]);
        let w = wce_weights(&freqs(&[("a", 1), ("b", 100)])).unwrap();
        assert_eq!((w["a"], w["b"]), (1.0, 0.505));
        assert_eq!(wce_weights(&freqs(&[("a", 5)])).unwrap()["a"], 1.0);
        assert_eq!(wce_weights(&BTreeMap::<String, u64>::new()), Err(LossError::EmptyFrequencies));
        assert_eq!(wce_weights(&freqs(&[("a", 0)])), Err(LossError::ZeroCount("a".into())));
    }

    #[test]
    fn single_class_loss_is_zero() {
        let x = array![[0.3, -1.2, 0.5], [2.0, 0.1, 0.0]];
        let p = ArcFaceParams::new(array![[1.0, 2.0, -0.5]]);
        let out = arcface_loss(x.view(), &[0, 0], &p).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_input.iter().chain(out.grad_weights.iter()).all(|&g| g == 0.0));
    }

    #[test]
    fn orthogonal_hand_example() {
        let x = array![[1.0, 0.0]];
        let p = ArcFaceParams::new(array![[1.0, 0.0], [0.0, 1.0]]);
        let out = arcface_loss(x.view(), &[0], &p).unwrap();
        let expected = (-64.0 * 0.5f64.cos()).exp().ln_1p();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn reduction_to_cosine_softmax() {
        let x = array![[0.4, -0.3, 0.9], [-1.0, 0.2, 0.1]];
        let w = array![[1.0, 0.0, 0.0], [0.2, 0.9, -0.1], [-0.5, 0.5, 0.5]];
        let p = ArcFaceParams::new(w.clone()).with_scale_margin(1.0, 0.0);
        let labels = [2, 1];
        let arc = arcface_loss(x.view(), &labels, &p).unwrap().loss;
        let xn = &x / &x.map_axis(Axis(1), |r| r.dot(&r).sqrt()).insert_axis(Axis(1));
        let wn = &w / &w.map_axis(Axis(1), |r| r.dot(&r).sqrt()).insert_axis(Axis(1));
        let ce = wce_loss(xn.dot(&wn.t()).view(), &labels, &[1.0; 3]).unwrap().loss;
        assert!((arc - ce).abs() < 1e-9);
    }

    #[test]
    fn arcface_errors() {
        let p = ArcFaceParams::new(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(
            arcface_loss(array![[0.0, 0.0]].view(), &[0], &p).unwrap_err(),
            LossError::ZeroVector { what: "embedding", row: 0 }
        );
        assert!(matches!(
            arcface_loss(array![[1.0, 0.0]].view(), &[2], &p),
            Err(LossError::LabelOutOfRange { sample: 0, label: 2, classes: 2 })
        ));
    }

    #[test]
    fn wce_examples() {
        let z = array![[2.0, 0.0], [0.0, 2.0]];
        let ce = wce_loss(z.view(), &[0, 1], &[1.0, 1.0]).unwrap().loss;
        let weighted = wce_loss(z.view(), &[0, 1], &[1.0, 0.5]).unwrap().loss;
        assert!((weighted - 0.75 * ce).abs() < 1e-15);
        let sharp = wce_loss(array![[800.0, 0.0]].view(), &[0], &[1.0, 1.0]).unwrap().loss;
        assert_eq!(sharp, 0.0);
    }

    #[test]
    fn quadratic_finite_difference_is_exact() {
        let x = [0.3, -1.7, 2.5, 0.81];
        let err = finite_diff_check(|p| (0.5 * p.iter().map(|v| v * v).sum::<f64>(), p.to_vec()), &x, FD_STEP).unwrap();
        assert!(err < 1e-9, "{err}");
        let bad = finite_diff_check(|_| (f64::INFINITY, vec![0.0]), &[1.0], FD_STEP);
        assert_eq!(bad, Err(LossError::NonFinite(None)));
    }

    #[test]
    fn small_gradient_checks() {
        let x = array![[0.4, -0.3, 0.9], [-1.0, 0.2, 0.1]];
        let w = array![[1.0, 0.1, 0.0], [0.2, 0.9, -0.1], [-0.5, 0.5, 0.5]];
        let p = ArcFaceParams::new(w).with_scale_margin(2.0, 0.5);
        assert!(check_arcface(&x, &[2, 0], &p, FD_STEP).unwrap() < 1e-4);
        assert!(check_wce(&x, &[2, 0], &[1.0, 0.6, 0.8], FD_STEP).unwrap() < 1e-6);
    }
}
