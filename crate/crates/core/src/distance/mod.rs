//! L2 normalization and cosine distances.
//!
//! Distances are `1 - u·v` on unit vectors, clamped to `[0, 2]`. Every dot
//! product is a sequential 64-bit sum over coordinates in index order, so the
//! scalar path, the blocked kernel and any thread count agree bit for bit.

pub mod kernel;

use rayon::prelude::*;
use thiserror::Error;

pub use kernel::PackedPanels;

/// Vectors with norm at or below this are rejected by [`l2_normalize`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Allowed deviation from unit norm for [`UnitVectorBlock`] rows.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Test rows handled by one parallel work item.
const TILE_ROWS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistanceError {
    #[error("ZeroVector: vector{} has norm at or below {NORM_EPSILON:e}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    ZeroVector { row: Option<usize> },
    #[error("DimensionMismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("row {row} has norm {norm}, not unit")]
    NotUnit { row: usize, norm: f64 },
    #[error("block data length {len} is not a multiple of dimension {dimension}")]
    Ragged { len: usize, dimension: usize },
}

/// Sequential dot product accumulated in `f64`.
#[inline]
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in u.iter().zip(v) {
        acc += a * b;
    }
    acc
}

fn normalize_into<T: Copy + Into<f64>>(v: &[T], out: &mut Vec<f64>) -> Result<(), DistanceError> {
    let mut sq = 0.0;
    for &x in v {
        let x: f64 = x.into();
        sq += x * x;
    }
    let norm = sq.sqrt();
    if !(norm > NORM_EPSILON) {
        return Err(DistanceError::ZeroVector { row: None });
    }
    out.extend(v.iter().map(|&x| x.into() / norm));
    Ok(())
}

/// Scales `v` to unit L2 norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, DistanceError> {
    let mut out = Vec::with_capacity(v.len());
    normalize_into(v, &mut out)?;
    Ok(out)
}

/// Widens an `f32` vector to `f64` and normalizes it.
pub fn l2_normalize_f32(v: &[f32]) -> Result<Vec<f64>, DistanceError> {
    let mut out = Vec::with_capacity(v.len());
    normalize_into(v, &mut out)?;
    Ok(out)
}

#[inline]
pub(crate) fn distance_from_dot(dot: f64) -> f64 {
    (1.0 - dot).clamp(0.0, 2.0)
}

/// Cosine distance between two unit vectors.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, DistanceError> {
    if u.len() != v.len() {
        return Err(DistanceError::DimensionMismatch { left: u.len(), right: v.len() });
    }
    Ok(distance_from_dot(dot(u, v)))
}

/// Row-major block of unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVectorBlock {
    dimension: usize,
    count: usize,
    data: Vec<f64>,
}

impl UnitVectorBlock {
    /// Normalizes every row. Rows must all have length `dimension`.
    pub fn from_rows<'a, T, I>(dimension: usize, rows: I) -> Result<Self, DistanceError>
    where
        T: Copy + Into<f64> + 'a,
        I: IntoIterator<Item = &'a [T]>,
    {
        let mut data = Vec::new();
        let mut count = 0;
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != dimension {
                return Err(DistanceError::DimensionMismatch { left: dimension, right: row.len() });
            }
            normalize_into(row, &mut data).map_err(|_| DistanceError::ZeroVector { row: Some(i) })?;
            count += 1;
        }
        Ok(Self { dimension, count, data })
    }

    /// Wraps data that is already normalized, checking each row's norm.
    pub fn from_unit_data(dimension: usize, data: Vec<f64>) -> Result<Self, DistanceError> {
        if dimension == 0 || !data.len().is_multiple_of(dimension) {
            return Err(DistanceError::Ragged { len: data.len(), dimension });
        }
        let count = data.len() / dimension;
        for (row, chunk) in data.chunks_exact(dimension).enumerate() {
            let norm = dot(chunk, chunk).sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(DistanceError::NotUnit { row, norm });
            }
        }
        Ok(Self { dimension, count, data })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dimension.max(1)).take(self.count)
    }
}

/// Test-by-gallery cosine distances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DistanceMatrix {
        let mut values = vec![0.0; self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        DistanceMatrix { rows: self.cols, cols: self.rows, values }
    }
}

/// All pairwise distances between `test` and `gallery` rows.
///
/// Parallel over test rows on the current rayon pool; the result does not
/// depend on the pool size.
pub fn distance_matrix(test: &UnitVectorBlock, gallery: &UnitVectorBlock) -> Result<DistanceMatrix, DistanceError> {
    if test.dimension != gallery.dimension {
        return Err(DistanceError::DimensionMismatch { left: test.dimension, right: gallery.dimension });
    }
    let rows = test.count;
    let cols = gallery.count;
    let mut values = vec![0.0; rows * cols];
    if rows == 0 || cols == 0 {
        return Ok(DistanceMatrix { rows, cols, values });
    }
    let packed = PackedPanels::pack(gallery.dimension, gallery.rows());
    values
        .par_chunks_mut(TILE_ROWS * cols)
        .enumerate()
        .for_each(|(tile, out)| {
            let start = tile * TILE_ROWS;
            let tile_rows: Vec<&[f64]> = (start..start + out.len() / cols).map(|i| test.row(i)).collect();
            kernel::distances_into(&tile_rows, &packed, out);
        });
    Ok(DistanceMatrix { rows, cols, values })
}
