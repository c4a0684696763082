//! Variant channels and matched-variant distance averaging.
//!
//! Every image is encoded once per declared [`VariantKey`] (model x TTA tag).
//! Channel `v` of a test image is compared only with channel `v` of each
//! gallery image, and the per-channel distances are averaged with equal
//! weight. Three models and four TTA images give twelve distance vectors.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{kernel, PackedPanels, UnitVectorBlock};
use crate::embed::EmbeddingSet;
pub use crate::embed::VariantKey;

/// Test images per parallel work item in [`aggregate_all`].
const TEST_TILE: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("no variants declared")]
    EmptyDeclaration,
    #[error("variant {0} declared twice")]
    DuplicateDeclaration(VariantKey),
    #[error("UnknownVariantTag: image {image_id} has undeclared variant {variant}")]
    UnknownVariantTag { image_id: String, variant: VariantKey },
    #[error("image {image_id} has conflicting {field} values")]
    InconsistentImage { image_id: String, field: &'static str },
    #[error("ZeroVector: image {image_id}, variant {variant}")]
    ZeroVector { image_id: String, variant: VariantKey },
    #[error("DimensionMismatch: test dimension {test}, gallery dimension {gallery}")]
    DimensionMismatch { test: usize, gallery: usize },
    #[error("a vector of variant {variant} does not have the set dimension {expected}")]
    VectorLength { variant: VariantKey, expected: usize },
    #[error("test and gallery declare different variant lists")]
    DeclarationMismatch,
    #[error("MissingVariant: {side} image {image_id} lacks variant {variant}")]
    MissingVariant { side: &'static str, image_id: String, variant: VariantKey },
    #[error("EmptyGallery: gallery has no images")]
    EmptyGallery,
    #[error("test image {test_image} and gallery image {gallery_image} share no variant")]
    NoCommonVariant { test_image: String, gallery_image: String },
    #[error("test image position {0} out of range")]
    ImageOutOfRange(usize),
}

/// What to do when a declared variant is absent for an image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingVariantPolicy {
    /// Every declared channel must exist on both sides.
    #[default]
    Strict,
    /// Average over the channels present on both sides.
    Renormalize,
}

impl std::str::FromStr for MissingVariantPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(Self::Strict),
            "renormalize" => Ok(Self::Renormalize),
            other => Err(format!("unknown policy {other:?} (expected strict or renormalize)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedImage {
    pub image_id: String,
    pub subject_id: String,
    pub class_id: String,
    /// Backing record index per declared variant.
    pub records: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
struct Channel {
    /// Block row per image.
    rows: Vec<Option<usize>>,
    /// Image per block row.
    images: Vec<usize>,
    block: UnitVectorBlock,
}

/// Images of one set grouped by declared variant, with normalized vectors.
#[derive(Debug, Clone)]
pub struct VariantIndex {
    declared: Vec<VariantKey>,
    dimension: usize,
    images: Vec<IndexedImage>,
    channels: Vec<Channel>,
}

impl VariantIndex {
    pub fn declared(&self) -> &[VariantKey] {
        &self.declared
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn images(&self) -> &[IndexedImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.images.iter().position(|img| img.image_id == image_id)
    }

    /// Total number of (image, variant) references.
    pub fn reference_count(&self) -> usize {
        self.images.iter().map(|img| img.records.iter().flatten().count()).sum()
    }

    /// Declared variants absent for image `i`.
    pub fn missing(&self, i: usize) -> Vec<VariantKey> {
        self.images[i]
            .records
            .iter()
            .zip(&self.declared)
            .filter(|(r, _)| r.is_none())
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Normalized vector of image `i` in channel `c`.
    pub fn vector(&self, i: usize, c: usize) -> Option<&[f64]> {
        let ch = &self.channels[c];
        ch.rows[i].map(|row| ch.block.row(row))
    }

    fn first_missing(&self, i: usize) -> Option<VariantKey> {
        self.missing(i).into_iter().next()
    }
}

/// Indexes `set` by image and declared variant, normalizing every vector.
///
/// Images keep their first-appearance order in the set.
pub fn group_variants(set: &EmbeddingSet, declared: &[VariantKey]) -> Result<VariantIndex, EnsembleError> {
    if declared.is_empty() {
        return Err(EnsembleError::EmptyDeclaration);
    }
    let mut slot: HashMap<&VariantKey, usize> = HashMap::new();
    for (c, v) in declared.iter().enumerate() {
        if slot.insert(v, c).is_some() {
            return Err(EnsembleError::DuplicateDeclaration(v.clone()));
        }
    }

    let mut images: Vec<IndexedImage> = Vec::new();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for (index, r) in set.records.iter().enumerate() {
        let variant = r.variant();
        let c = *slot.get(&variant).ok_or_else(|| EnsembleError::UnknownVariantTag {
            image_id: r.image_id.clone(),
            variant: variant.clone(),
        })?;
        let pos = *by_id.entry(r.image_id.as_str()).or_insert_with(|| {
            images.push(IndexedImage {
                image_id: r.image_id.clone(),
                subject_id: r.subject_id.clone(),
                class_id: r.class_id.clone(),
                records: vec![None; declared.len()],
            });
            images.len() - 1
        });
        let img = &mut images[pos];
        if img.subject_id != r.subject_id {
            return Err(EnsembleError::InconsistentImage { image_id: r.image_id.clone(), field: "subject_id" });
        }
        if img.class_id != r.class_id {
            return Err(EnsembleError::InconsistentImage { image_id: r.image_id.clone(), field: "class_id" });
        }
        // Duplicate keys are rejected by the parser; the last one wins here.
        img.records[c] = Some(index);
    }

    let mut channels = Vec::with_capacity(declared.len());
    for (c, variant) in declared.iter().enumerate() {
        let mut rows = vec![None; images.len()];
        let mut members = Vec::new();
        for (i, img) in images.iter().enumerate() {
            if let Some(record) = img.records[c] {
                rows[i] = Some(members.len());
                members.push((i, record));
            }
        }
        let block = UnitVectorBlock::from_rows(
            set.dimension,
            members.iter().map(|&(_, record)| set.records[record].vector.as_slice()),
        )
        .map_err(|e| match e {
            crate::distance::DistanceError::ZeroVector { row: Some(row) } => EnsembleError::ZeroVector {
                image_id: images[members[row].0].image_id.clone(),
                variant: variant.clone(),
            },
            _ => EnsembleError::VectorLength { variant: variant.clone(), expected: set.dimension },
        })?;
        channels.push(Channel { rows, images: members.into_iter().map(|(i, _)| i).collect(), block });
    }

    Ok(VariantIndex { declared: declared.to_vec(), dimension: set.dimension, images, channels })
}

/// Mean matched-channel distance from one test image to every gallery image.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedDistances {
    pub test_image_id: String,
    pub gallery_image_ids: Arc<[String]>,
    pub values: Vec<f64>,
    pub channels_used: Vec<u16>,
}

/// A gallery index with its channels packed for the distance kernel.
pub struct PreparedGallery<'a> {
    index: &'a VariantIndex,
    packed: Vec<PackedPanels>,
    ids: Arc<[String]>,
    policy: MissingVariantPolicy,
}

impl<'a> PreparedGallery<'a> {
    pub fn new(gallery: &'a VariantIndex, policy: MissingVariantPolicy) -> Result<Self, EnsembleError> {
        if gallery.is_empty() {
            return Err(EnsembleError::EmptyGallery);
        }
        if policy == MissingVariantPolicy::Strict {
            for i in 0..gallery.len() {
                if let Some(variant) = gallery.first_missing(i) {
                    return Err(EnsembleError::MissingVariant {
                        side: "gallery",
                        image_id: gallery.images[i].image_id.clone(),
                        variant,
                    });
                }
            }
        }
        let packed = gallery
            .channels
            .iter()
            .map(|ch| PackedPanels::pack(gallery.dimension, ch.block.rows()))
            .collect();
        let ids: Arc<[String]> = gallery.images.iter().map(|img| img.image_id.clone()).collect();
        Ok(Self { index: gallery, packed, ids, policy })
    }

    pub fn index(&self) -> &VariantIndex {
        self.index
    }

    pub fn image_ids(&self) -> &Arc<[String]> {
        &self.ids
    }

    fn check_test(&self, test: &VariantIndex) -> Result<(), EnsembleError> {
        if test.declared != self.index.declared {
            return Err(EnsembleError::DeclarationMismatch);
        }
        if test.dimension != self.index.dimension {
            return Err(EnsembleError::DimensionMismatch { test: test.dimension, gallery: self.index.dimension });
        }
        Ok(())
    }

    /// Aggregated distances for the given test images, in order.
    pub fn aggregate(&self, test: &VariantIndex, test_images: &[usize]) -> Result<Vec<AggregatedDistances>, EnsembleError> {
        self.check_test(test)?;
        for &t in test_images {
            if t >= test.len() {
                return Err(EnsembleError::ImageOutOfRange(t));
            }
            if self.policy == MissingVariantPolicy::Strict {
                if let Some(variant) = test.first_missing(t) {
                    return Err(EnsembleError::MissingVariant {
                        side: "test",
                        image_id: test.images[t].image_id.clone(),
                        variant,
                    });
                }
            }
        }

        let n = self.index.len();
        let len = test_images.len() * n;
        let mut sums = vec![0.0f64; len];
        let mut mins = vec![f64::INFINITY; len];
        let mut maxs = vec![f64::NEG_INFINITY; len];
        let mut counts = vec![0u16; len];
        let mut scratch = Vec::new();

        for (c, (gallery_ch, packed)) in self.index.channels.iter().zip(&self.packed).enumerate() {
            let present: Vec<(usize, &[f64])> = test_images
                .iter()
                .enumerate()
                .filter_map(|(local, &t)| test.vector(t, c).map(|v| (local, v)))
                .collect();
            if present.is_empty() || gallery_ch.images.is_empty() {
                continue;
            }
            let rows: Vec<&[f64]> = present.iter().map(|&(_, v)| v).collect();
            let width = packed.count();
            scratch.clear();
            scratch.resize(rows.len() * width, 0.0);
            kernel::distances_into(&rows, packed, &mut scratch);
            for (p, &(local, _)) in present.iter().enumerate() {
                let base = local * n;
                for (&g, &d) in gallery_ch.images.iter().zip(&scratch[p * width..(p + 1) * width]) {
                    let at = base + g;
                    sums[at] += d;
                    mins[at] = mins[at].min(d);
                    maxs[at] = maxs[at].max(d);
                    counts[at] += 1;
                }
            }
        }

        test_images
            .iter()
            .enumerate()
            .map(|(local, &t)| {
                let range = local * n..(local + 1) * n;
                let mut values = Vec::with_capacity(n);
                for at in range.clone() {
                    if counts[at] == 0 {
                        return Err(EnsembleError::NoCommonVariant {
                            test_image: test.images[t].image_id.clone(),
                            gallery_image: self.ids[at - range.start].clone(),
                        });
                    }
                    // The clamp keeps the mean inside the channel range, so a
                    // set of identical channels reproduces that channel exactly.
                    values.push((sums[at] / f64::from(counts[at])).clamp(mins[at], maxs[at]));
                }
                Ok(AggregatedDistances {
                    test_image_id: test.images[t].image_id.clone(),
                    gallery_image_ids: Arc::clone(&self.ids),
                    values,
                    channels_used: counts[range].to_vec(),
                })
            })
            .collect()
    }
}

/// Aggregated distances from test image `test_image` to every gallery image.
pub fn aggregate_distances(
    test: &VariantIndex,
    test_image: usize,
    gallery: &VariantIndex,
    policy: MissingVariantPolicy,
) -> Result<AggregatedDistances, EnsembleError> {
    let prepared = PreparedGallery::new(gallery, policy)?;
    Ok(prepared.aggregate(test, &[test_image])?.remove(0))
}

/// Aggregated distances for every test image, parallel over tiles of test
/// images on the current rayon pool. Output order follows `test`.
pub fn aggregate_all(
    test: &VariantIndex,
    gallery: &VariantIndex,
    policy: MissingVariantPolicy,
) -> Result<Vec<AggregatedDistances>, EnsembleError> {
    let prepared = PreparedGallery::new(gallery, policy)?;
    prepared.aggregate_all(test)
}

impl PreparedGallery<'_> {
    pub fn aggregate_all(&self, test: &VariantIndex) -> Result<Vec<AggregatedDistances>, EnsembleError> {
        let positions: Vec<usize> = (0..test.len()).collect();
        let tiles = positions
            .par_chunks(TEST_TILE)
            .map(|tile| self.aggregate(test, tile))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(tiles.into_iter().flatten().collect())
    }
}
