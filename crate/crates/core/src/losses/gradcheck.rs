use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{check_arcface, check_wce, wce_weights, ArcFaceParams, LossError, FD_STEP};
use crate::seed::rng_for;

pub const ARCFACE_TOLERANCE: f64 = 1e-4;
pub const WCE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub seed: u64,
    pub cases: usize,
    pub step: f64,
    pub arcface_max_error: f64,
    pub wce_max_error: f64,
    pub arcface_tolerance: f64,
    pub wce_tolerance: f64,
}

impl GradCheckSummary {
    pub fn passes(&self) -> bool {
        self.arcface_max_error < self.arcface_tolerance && self.wce_max_error < self.wce_tolerance
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

/// One random ArcFace case: N in 1..=8, d in 2..=16, n in 2..=5 classes,
/// s in [1, 8), m in [0, 0.5).
pub fn random_arcface_case(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>, ArcFaceParams) {
    let n = rng.random_range(1..=8);
    let d = rng.random_range(2..=16);
    let classes = rng.random_range(2..=5);
    let x = normal_matrix(rng, n, d, 1.0);
    let w = normal_matrix(rng, classes, d, 1.0);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let s = rng.random_range(1.0..8.0);
    let m = rng.random_range(0.0..0.5);
    (x, labels, ArcFaceParams::new(w).with_scale_margin(s, m))
}

/// One random weighted cross-entropy case with class weights from random
/// counts.
pub fn random_wce_case(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>, Vec<f64>) {
    let n = rng.random_range(1..=8);
    let classes = rng.random_range(2..=10);
    let logits = normal_matrix(rng, n, classes, 1.0);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let counts: BTreeMap<usize, u64> = (0..classes).map(|c| (c, rng.random_range(1..=100))).collect();
    let weights = wce_weights(&counts).expect("non-empty, positive").into_values().collect();
    (logits, labels, weights)
}

/// Runs `cases` seeded checks of each loss.
pub fn run_gradient_checks(seed: u64, cases: usize) -> Result<GradCheckSummary, LossError> {
    let mut arc_rng = rng_for(seed, "checkgrad/arcface");
    let mut wce_rng = rng_for(seed, "checkgrad/wce");
    let mut arcface_max_error = 0.0f64;
    let mut wce_max_error = 0.0f64;
    for _ in 0..cases {
        let (x, labels, params) = random_arcface_case(&mut arc_rng);
        arcface_max_error = arcface_max_error.max(check_arcface(&x, &labels, &params, FD_STEP)?);
        let (z, labels, weights) = random_wce_case(&mut wce_rng);
        wce_max_error = wce_max_error.max(check_wce(&z, &labels, &weights, FD_STEP)?);
    }
    Ok(GradCheckSummary {
        seed,
        cases,
        step: FD_STEP,
        arcface_max_error,
        wce_max_error,
        arcface_tolerance: ARCFACE_TOLERANCE,
        wce_tolerance: WCE_TOLERANCE,
    })
}
