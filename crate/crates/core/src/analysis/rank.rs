//! Numerical rank and the circuit rank bounds.
//!
//! For a square circuit with total dimension `d`, gates of block size
//! `d_a = d_m * d_n` and ranks `R_a`, the operator rank `R` satisfies
//!
//! ```text
//! sum_a d R_a / d_a - d (N_T - 1)  <=  R  <=  min_a d R_a / d_a
//! ```
//!
//! and is exactly `d` when every gate has full rank.

use serde::Serialize;

use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::plan::QuantaPlan;

/// Relative threshold multiplier: a singular value counts when it exceeds
/// `tolerance * sigma_max * max(rows, cols)`.
pub const DEFAULT_RANK_TOLERANCE: f64 = f64::EPSILON;

/// Singular values within this factor of the threshold (either side) mark
/// a rank as tolerance-sensitive.
pub const SENSITIVITY_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub tolerance: f64,
    pub threshold: f64,
    pub lower_bound: Option<i64>,
    pub upper_bound: Option<i64>,
    pub gate_ranks: Vec<usize>,
    /// Set when some gate has a singular value close enough to its
    /// threshold that its counted rank depends on the tolerance choice.
    pub tolerance_sensitive: bool,
}

impl RankReport {
    /// `Some(true)` when the rank lies within both bounds, `None` when no
    /// bounds were computed.
    pub fn within_bounds(&self) -> Option<bool> {
        let (lo, hi) = (self.lower_bound?, self.upper_bound?);
        let r = self.rank as i64;
        Some(lo <= r && r <= hi)
    }

    pub fn within_upper_bound(&self) -> Option<bool> {
        Some(self.rank as i64 <= self.upper_bound?)
    }
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    m.check_finite("matrix")?;
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(Vec::new());
    }
    let mut sv: Vec<f64> = m.to_nalgebra().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

fn threshold_for(sv: &[f64], shape: (usize, usize), tolerance: f64) -> f64 {
    let smax = sv.first().copied().unwrap_or(0.0);
    tolerance * smax * shape.0.max(shape.1) as f64
}

fn near_threshold(sv: &[f64], threshold: f64) -> bool {
    threshold > 0.0
        && sv.iter().any(|&s| s > threshold / SENSITIVITY_FACTOR && s < threshold * SENSITIVITY_FACTOR)
}

pub fn numerical_rank(m: &Matrix, tolerance: f64) -> Result<RankReport> {
    ensure!(tolerance >= 0.0 && tolerance.is_finite(), InvalidArgument, "tolerance must be finite and >= 0");
    let sv = singular_values(m)?;
    let threshold = threshold_for(&sv, m.shape(), tolerance);
    let rank = sv.iter().filter(|&&s| s > threshold).count();
    Ok(RankReport {
        rank,
        singular_values: sv,
        tolerance,
        threshold,
        lower_bound: None,
        upper_bound: None,
        gate_ranks: Vec::new(),
        tolerance_sensitive: false,
    })
}

/// Measures the rank of the materialized circuit together with the bounds
/// implied by its per-gate ranks, all under the same tolerance rule.
pub fn rank_bounds(plan: &QuantaPlan, tolerance: f64) -> Result<RankReport> {
    ensure!(plan.is_square(), InvalidArgument, "rank bounds need a square plan");
    let d = plan.input_len() as i64;
    let mut gate_ranks = Vec::with_capacity(plan.gate_count());
    let mut sensitive = false;
    let mut sum = 0i64;
    let mut min = d;
    for g in plan.gates() {
        let report = numerical_rank(&g.tensor, tolerance)?;
        sensitive |= near_threshold(&report.singular_values, report.threshold);
        let block = g.tensor.rows() as i64;
        let lifted = d * report.rank as i64 / block;
        sum += lifted;
        min = min.min(lifted);
        gate_ranks.push(report.rank);
    }
    let n_t = plan.gate_count() as i64;
    let mut report = numerical_rank(&plan.materialize(), tolerance)?;
    report.lower_bound = Some(sum - d * (n_t - 1));
    report.upper_bound = Some(min);
    report.gate_ranks = gate_ranks;
    report.tolerance_sensitive = sensitive;
    Ok(report)
}
