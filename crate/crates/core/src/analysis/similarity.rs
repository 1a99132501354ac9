//! Subspace similarity between the leading right singular vectors of two
//! weight updates:
//!
//! ```text
//! phi(i, j) = || V1[:, :i]^T V2[:, :j] ||_F^2 / min(i, j)
//! ```
//!
//! 1 when one subspace contains the other, 0 when they are orthogonal.

use serde::Serialize;

use super::rank::{numerical_rank, DEFAULT_RANK_TOLERANCE};
use crate::error::{ensure, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityGrid {
    /// `phi[(i-1, j-1)]` for every `1 <= i <= max_i`, `1 <= j <= max_j`.
    /// Only `i <= j` is part of the reported grid; the rest is kept for
    /// symmetry checks.
    values: Matrix,
    pub max_i: usize,
    pub max_j: usize,
    /// True when the requested extents exceeded a numerical rank and were
    /// cut back.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityPoint {
    pub i: usize,
    pub j: usize,
    pub phi: f64,
}

impl SimilarityGrid {
    /// `phi(i, j)` for `1 <= i <= j`, one-based.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (i >= 1 && i <= j).then(|| self.value(i, j)).flatten()
    }

    /// `phi(i, j)` without the `i <= j` restriction.
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        (i >= 1 && j >= 1 && i <= self.max_i && j <= self.max_j).then(|| self.values.get(i - 1, j - 1))
    }

    /// Reported points, row by row, `i <= j` only.
    pub fn points(&self) -> Vec<SimilarityPoint> {
        let mut out = Vec::new();
        for i in 1..=self.max_i {
            for j in i..=self.max_j {
                out.push(SimilarityPoint { i, j, phi: self.values.get(i - 1, j - 1) });
            }
        }
        out
    }
}

/// Right singular vectors as columns, ordered by descending singular value.
pub fn right_singular_vectors(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    m.check_finite("matrix")?;
    let svd = m.to_nalgebra().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv = order.iter().map(|&k| svd.singular_values[k]).collect();
    let v = Matrix::from_fn(m.cols(), order.len(), |r, c| v_t[(order[c], r)]);
    Ok((sv, v))
}

pub fn subspace_similarity(w1: &Matrix, w2: &Matrix, max_i: usize, max_j: usize) -> Result<SimilarityGrid> {
    ensure!(
        w1.cols() == w2.cols(),
        DimensionMismatch,
        "column counts differ: {} vs {}",
        w1.cols(),
        w2.cols()
    );
    ensure!(max_i >= 1 && max_j >= 1, InvalidArgument, "grid extents must be positive");
    let r1 = numerical_rank(w1, DEFAULT_RANK_TOLERANCE)?.rank;
    let r2 = numerical_rank(w2, DEFAULT_RANK_TOLERANCE)?.rank;
    let (mi, mj) = (max_i.min(r1), max_j.min(r2));
    let truncated = (mi, mj) != (max_i, max_j);
    if truncated {
        log::warn!("similarity grid truncated from {max_i}x{max_j} to {mi}x{mj} (numerical ranks {r1}, {r2})");
    }
    let (_, v1) = right_singular_vectors(w1)?;
    let (_, v2) = right_singular_vectors(w2)?;

    // Squared cross-Gram entries, then 2-D prefix sums.
    let n = w1.cols();
    let mut cum = Matrix::zeros(mi + 1, mj + 1);
    for a in 0..mi {
        for b in 0..mj {
            let g: f64 = (0..n).map(|k| v1.get(k, a) * v2.get(k, b)).sum();
            let v = g * g + cum.get(a, b + 1) + cum.get(a + 1, b) - cum.get(a, b);
            cum.set(a + 1, b + 1, v);
        }
    }
    let values = Matrix::from_fn(mi, mj, |i, j| cum.get(i + 1, j + 1) / (i.min(j) + 1) as f64);
    Ok(SimilarityGrid { values, max_i: mi, max_j: mj, truncated })
}
