//! Seeded long-tail embedding datasets for desk-scale experiments.
//!
//! Disorder sizes follow a truncated discrete power law. Each disorder has a
//! center on the unit sphere; patients, photos, models and test-time variants
//! each add their own angular noise. Model views are additionally rotated by
//! a small per-model rotation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cv::{self, CvError, FoldAssignment, Split, SplitTable};
use crate::embed::{self, EmbedError, EmbeddingRecord, EmbeddingSet, TtaTag};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("SpecInvalid: {0}")]
    SpecInvalid(String),
    #[error(transparent)]
    Cv(#[from] CvError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongTailSpec {
    pub n_disorders: usize,
    /// Exponent of `P(k) ∝ k^-alpha` over patient counts.
    pub alpha: f64,
    pub min_patients: usize,
    pub max_patients: usize,
    /// Disorders with more patients than this are frequent.
    pub frequent_threshold: usize,
    /// Images per patient are `1 + Poisson(extra_images_mean)`.
    pub extra_images_mean: f64,
    pub dimension: usize,
    pub n_models: usize,
    pub tta_tags: Vec<TtaTag>,
    /// Patient around disorder center.
    pub sigma_class: f64,
    /// Photo around patient.
    pub sigma_image: f64,
    /// Per-model view of a photo, and size of the per-model rotation.
    pub sigma_model: f64,
    /// Test-time variant around the model view.
    pub sigma_tta: f64,
    /// Subject proportions for train / val / test within frequent disorders.
    pub split_weights: [f64; 3],
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            n_disorders: 300,
            alpha: 1.42,
            min_patients: 2,
            max_patients: 100,
            frequent_threshold: 6,
            extra_images_mean: 0.25,
            dimension: 128,
            n_models: 3,
            tta_tags: TtaTag::ALL.to_vec(),
            sigma_class: 1.6,
            sigma_image: 0.4,
            sigma_model: 0.5,
            sigma_tta: 0.3,
            split_weights: [5100.0, 661.0, 593.0],
            n_folds: 10,
            seed: 0,
        }
    }
}

impl LongTailSpec {
    /// Same shape as the default but with the 449 disorders of the reference
    /// database.
    pub fn gmdb_like() -> Self {
        Self { n_disorders: 449, ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| Err(SynthError::SpecInvalid(msg));
        if self.n_disorders == 0 || self.n_disorders > 9999 {
            return fail(format!("n_disorders must be in 1..=9999, got {}", self.n_disorders));
        }
        if self.min_patients < 2 {
            return fail(format!("min_patients must be at least 2, got {}", self.min_patients));
        }
        if self.max_patients < self.min_patients {
            return fail("max_patients is below min_patients".into());
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return fail(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !self.extra_images_mean.is_finite() || self.extra_images_mean < 0.0 {
            return fail("extra_images_mean must be finite and non-negative".into());
        }
        if self.dimension == 0 || self.n_models == 0 {
            return fail("dimension and n_models must be positive".into());
        }
        let mut tags = self.tta_tags.clone();
        tags.sort();
        tags.dedup();
        if tags.is_empty() || tags.len() != self.tta_tags.len() {
            return fail("tta_tags must be non-empty and distinct".into());
        }
        for (name, s) in [
            ("sigma_class", self.sigma_class),
            ("sigma_image", self.sigma_image),
            ("sigma_model", self.sigma_model),
            ("sigma_tta", self.sigma_tta),
        ] {
            if !s.is_finite() || s < 0.0 {
                return fail(format!("{name} must be finite and non-negative, got {s}"));
            }
        }
        if self.split_weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return fail("split_weights must be positive".into());
        }
        if self.n_folds < 2 {
            return fail("n_folds must be at least 2".into());
        }
        Ok(())
    }

    pub fn is_frequent(&self, patients: usize) -> bool {
        patients > self.frequent_threshold
    }

    pub fn model_ids(&self) -> Vec<String> {
        (1..=self.n_models).map(|m| format!("m{m}")).collect()
    }
}

pub fn class_id(index: usize) -> String {
    format!("D{:04}", index + 1)
}

/// Patient count per disorder.
pub fn sample_longtail(spec: &LongTailSpec) -> Result<BTreeMap<String, usize>, SynthError> {
    spec.validate()?;
    let support: Vec<usize> = (spec.min_patients..=spec.max_patients).collect();
    let weights = support.iter().map(|&k| (k as f64).powf(-spec.alpha));
    let dist = WeightedIndex::new(weights).map_err(|e| SynthError::SpecInvalid(e.to_string()))?;
    let mut rng = rng_for(spec.seed, "synth/counts");
    Ok((0..spec.n_disorders).map(|c| (class_id(c), support[dist.sample(&mut rng)])).collect())
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Moves unit `v` by a Gaussian step in its tangent space, scaled so that
/// `sigma` is roughly the tangent of the deviation angle, then renormalizes.
fn perturb(v: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = v.len();
    let g = gaussian(rng, d);
    if d < 2 || sigma == 0.0 {
        return v.to_vec();
    }
    let along: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
    let scale = sigma / ((d - 1) as f64).sqrt();
    let mut out: Vec<f64> = v.iter().zip(&g).map(|(&x, &gx)| x + scale * (gx - along * x)).collect();
    normalize(&mut out);
    out
}

/// Orthonormalized `I + sigma/sqrt(d) G`, row-major.
fn small_rotation(d: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = sigma / (d as f64).sqrt();
    let mut m: Vec<f64> = gaussian(rng, d * d).into_iter().map(|g| g * scale).collect();
    for i in 0..d {
        m[i * d + i] += 1.0;
    }
    for i in 0..d {
        for j in 0..i {
            let proj: f64 = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum();
            for k in 0..d {
                m[i * d + k] -= proj * m[j * d + k];
            }
        }
        normalize(&mut m[i * d..(i + 1) * d]);
    }
    m
}

fn rotate(r: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    r.chunks_exact(d).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub patients: usize,
    pub images: usize,
    pub frequent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub disorders: usize,
    pub frequent_disorders: usize,
    pub rare_disorders: usize,
    pub patients: usize,
    pub images: usize,
    pub split_images: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: LongTailSpec,
    pub classes: BTreeMap<String, ClassSummary>,
    pub centers: BTreeMap<String, Vec<f64>>,
    /// One set per model, every image in every declared variant.
    pub sets: Vec<EmbeddingSet>,
    pub splits: SplitTable,
    pub folds: FoldAssignment,
}

impl SyntheticDataset {
    pub fn model_ids(&self) -> Vec<String> {
        self.spec.model_ids()
    }

    /// All models in one set.
    pub fn combined(&self) -> EmbeddingSet {
        EmbeddingSet::merge(&self.sets).expect("generated sets share dimension and keys")
    }

    /// `(frequent, rare)` halves of [`Self::combined`].
    pub fn partitioned(&self) -> (EmbeddingSet, EmbeddingSet) {
        cv::partition_by_splits(&self.combined(), &self.splits).expect("every generated image has a split")
    }

    pub fn summary(&self) -> DatasetSummary {
        let frequent = self.classes.values().filter(|c| c.frequent).count();
        let mut split_images: BTreeMap<String, usize> = BTreeMap::new();
        for (_, split) in self.splits.iter() {
            let key = match split {
                Split::Fold(_) => "rare".to_string(),
                s => s.to_string(),
            };
            *split_images.entry(key).or_default() += 1;
        }
        DatasetSummary {
            disorders: self.classes.len(),
            frequent_disorders: frequent,
            rare_disorders: self.classes.len() - frequent,
            patients: self.classes.values().map(|c| c.patients).sum(),
            images: self.classes.values().map(|c| c.images).sum(),
            split_images,
        }
    }

    /// Writes `model_<id>.tsv` per model, `splits.csv` and `spec.json`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (set, id) in self.sets.iter().zip(self.model_ids()) {
            let path = dir.join(format!("model_{id}.tsv"));
            embed::write_embedding_path(set, &path)?;
            written.push(path);
        }
        let path = dir.join("splits.csv");
        self.splits.write(fs::File::create(&path)?)?;
        written.push(path);
        let echo = serde_json::json!({
            "spec": self.spec,
            "summary": self.summary(),
            "tool_version": crate::TOOL_VERSION,
        });
        let path = dir.join("spec.json");
        let mut text = serde_json::to_string_pretty(&echo).expect("spec serializes");
        text.push('\n');
        fs::write(&path, text)?;
        written.push(path);
        Ok(written)
    }
}

/// Integer split sizes for `n` subjects, at least one each in val and test.
fn split_sizes(n: usize, weights: [f64; 3]) -> [usize; 3] {
    let total: f64 = weights.iter().sum();
    let val = ((n as f64 * weights[1] / total).round() as usize).max(1);
    let test = ((n as f64 * weights[2] / total).round() as usize).max(1);
    [n.saturating_sub(val + test), val, test]
}

pub fn generate_dataset(spec: &LongTailSpec) -> Result<SyntheticDataset, SynthError> {
    let counts = sample_longtail(spec)?;
    let d = spec.dimension;
    let models = spec.model_ids();

    let mut center_rng = rng_for(spec.seed, "synth/centers");
    let centers: BTreeMap<String, Vec<f64>> = counts
        .keys()
        .map(|c| {
            let mut v = gaussian(&mut center_rng, d);
            normalize(&mut v);
            (c.clone(), v)
        })
        .collect();

    let mut rotation_rng = rng_for(spec.seed, "synth/rotations");
    let rotations: Vec<Vec<f64>> = models.iter().map(|_| small_rotation(d, spec.sigma_model, &mut rotation_rng)).collect();

    let extra = if spec.extra_images_mean > 0.0 {
        Some(Poisson::new(spec.extra_images_mean).map_err(|e| SynthError::SpecInvalid(e.to_string()))?)
    } else {
        None
    };
    let metadata = |model: &str| {
        BTreeMap::from([
            ("dataset".to_string(), "synthetic-longtail".to_string()),
            ("model".to_string(), model.to_string()),
            ("seed".to_string(), spec.seed.to_string()),
        ])
    };
    let mut sets: Vec<EmbeddingSet> = models
        .iter()
        .map(|m| EmbeddingSet { dimension: d, records: Vec::new(), metadata: metadata(m) })
        .collect();

    let mut rng = rng_for(spec.seed, "synth/images");
    let mut split_rng = rng_for(spec.seed, "synth/splits");
    let mut splits = SplitTable::new();
    let mut classes = BTreeMap::new();
    let mut rare_subjects: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut images_of: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let (mut next_subject, mut next_image) = (1usize, 1usize);

    for (class, &patients) in &counts {
        let frequent = spec.is_frequent(patients);
        let mut subjects = Vec::with_capacity(patients);
        let mut class_images = 0;
        for _ in 0..patients {
            let subject = format!("P{next_subject:06}");
            next_subject += 1;
            let patient = perturb(&centers[class], spec.sigma_class, &mut rng);
            let n_images = 1 + extra.map_or(0, |p| p.sample(&mut rng) as usize);
            for _ in 0..n_images {
                let image = format!("I{next_image:07}");
                next_image += 1;
                let photo = perturb(&patient, spec.sigma_image, &mut rng);
                for ((set, model), rotation) in sets.iter_mut().zip(&models).zip(&rotations) {
                    let view = rotate(rotation, &perturb(&photo, spec.sigma_model, &mut rng));
                    for &tag in &spec.tta_tags {
                        let v = perturb(&view, spec.sigma_tta, &mut rng);
                        set.records.push(EmbeddingRecord {
                            image_id: image.clone(),
                            subject_id: subject.clone(),
                            class_id: class.clone(),
                            model_id: model.clone(),
                            tta_tag: tag,
                            vector: v.iter().map(|&x| x as f32).collect(),
                        });
                    }
                }
                images_of.entry(subject.clone()).or_default().push(image);
                class_images += 1;
            }
            subjects.push(subject);
        }

        if frequent {
            let mut order = subjects.clone();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut split_rng);
            let [train, val, _] = split_sizes(order.len(), spec.split_weights);
            for (i, s) in order.iter().enumerate() {
                let split = if i < train {
                    Split::Train
                } else if i < train + val {
                    Split::Val
                } else {
                    Split::Test
                };
                for image in &images_of[s] {
                    splits.insert(image, split);
                }
            }
        } else {
            rare_subjects.insert(class.clone(), subjects);
        }
        classes.insert(class.clone(), ClassSummary { patients, images: class_images, frequent });
    }

    let folds = cv::assign_folds(&rare_subjects, spec.n_folds, derive_seed(spec.seed, "synth/folds"))?;
    for (subject, fold) in folds.iter() {
        for image in &images_of[subject] {
            splits.insert(image, Split::Fold(fold));
        }
    }

    Ok(SyntheticDataset { spec: spec.clone(), classes, centers, sets, splits, folds })
}
