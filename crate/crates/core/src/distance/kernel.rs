//! Register-blocked dot-product kernel.
//!
//! Gallery rows are packed into panels of [`NR`] interleaved rows and test rows
//! into groups of [`MR`], so one micro-kernel call produces an `MR x NR` tile of
//! dot products. Each entry is still a plain sequential sum over coordinates,
//! which keeps the output identical to [`super::dot`] whatever the tiling or
//! instruction set. Wider instruction sets are used through runtime dispatch
//! only; they vectorize across entries, never within one sum.

use super::distance_from_dot;

pub const MR: usize = 4;
pub const NR: usize = 8;

/// Gallery rows laid out panel by panel: within a panel, coordinate `k` of
/// row `r` lives at `k * NR + r`. The last panel is zero padded.
#[derive(Debug, Clone)]
pub struct PackedPanels {
    dimension: usize,
    count: usize,
    data: Vec<f64>,
}

impl PackedPanels {
    pub fn pack<'a>(dimension: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let count = rows.len();
        let panels = count.div_ceil(NR);
        let mut data = vec![0.0; panels * NR * dimension];
        for (j, row) in rows.iter().enumerate() {
            debug_assert_eq!(row.len(), dimension);
            let base = (j / NR) * NR * dimension;
            let r = j % NR;
            for (k, &x) in row.iter().enumerate() {
                data[base + k * NR + r] = x;
            }
        }
        Self { dimension, count, data }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn panels(&self) -> usize {
        self.count.div_ceil(NR)
    }

    fn panel(&self, p: usize) -> &[f64] {
        let len = NR * self.dimension;
        &self.data[p * len..(p + 1) * len]
    }
}

#[inline(always)]
fn micro(a: &[f64], b: &[f64]) -> [[f64; NR]; MR] {
    let mut acc = [[0.0f64; NR]; MR];
    for (a_k, b_k) in a.chunks_exact(MR).zip(b.chunks_exact(NR)) {
        for r in 0..MR {
            let x = a_k[r];
            for c in 0..NR {
                acc[r][c] += x * b_k[c];
            }
        }
    }
    acc
}

#[inline(always)]
fn distances_generic(rows: &[&[f64]], gallery: &PackedPanels, out: &mut [f64]) {
    let d = gallery.dimension;
    let cols = gallery.count;
    let groups = rows.len().div_ceil(MR);
    let mut packed = vec![0.0; groups * MR * d];
    for (i, row) in rows.iter().enumerate() {
        let base = (i / MR) * MR * d;
        let r = i % MR;
        for (k, &x) in row.iter().enumerate() {
            packed[base + k * MR + r] = x;
        }
    }
    for p in 0..gallery.panels() {
        let b = gallery.panel(p);
        let col0 = p * NR;
        let width = NR.min(cols - col0);
        for g in 0..groups {
            let acc = micro(&packed[g * MR * d..(g + 1) * MR * d], b);
            let row0 = g * MR;
            for (r, acc_r) in acc.iter().enumerate().take(MR.min(rows.len() - row0)) {
                let dst = &mut out[(row0 + r) * cols + col0..(row0 + r) * cols + col0 + width];
                for (o, &v) in dst.iter_mut().zip(acc_r) {
                    *o = distance_from_dot(v);
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn distances_avx512(rows: &[&[f64]], gallery: &PackedPanels, out: &mut [f64]) {
    distances_generic(rows, gallery, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn distances_avx2(rows: &[&[f64]], gallery: &PackedPanels, out: &mut [f64]) {
    distances_generic(rows, gallery, out)
}

/// Writes `rows.len() x gallery.count()` cosine distances into `out`
/// (row-major).
pub fn distances_into(rows: &[&[f64]], gallery: &PackedPanels, out: &mut [f64]) {
    assert_eq!(out.len(), rows.len() * gallery.count, "output buffer has the wrong size");
    assert!(rows.iter().all(|r| r.len() == gallery.dimension), "row dimension mismatch");
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { distances_avx512(rows, gallery, out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            unsafe { distances_avx2(rows, gallery, out) };
            return;
        }
    }
    distances_generic(rows, gallery, out)
}

/// Portable path, exposed so tests can compare it with the dispatched one.
pub fn distances_into_portable(rows: &[&[f64]], gallery: &PackedPanels, out: &mut [f64]) {
    assert_eq!(out.len(), rows.len() * gallery.count, "output buffer has the wrong size");
    distances_generic(rows, gallery, out)
}
