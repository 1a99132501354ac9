//! Finite-difference verification of circuit gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::grad::grad_plan;
use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::plan::QuantaPlan;

pub const FD_STEP: f64 = 1e-5;

/// Relative errors use `max(|analytic|, |numeric|, FLOOR * max|analytic|)`
/// as denominator, so entries far below the gradient's own scale are
/// judged against that scale instead of against themselves.
pub const RELATIVE_FLOOR: f64 = 1e-3;

pub const MAX_CHECK_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params_checked: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub worst_gate: usize,
    pub worst_entry: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks [`grad_plan`] against central differences of
/// `L = sum(upstream * plan(x))` for random `x` and `upstream`.
pub fn grad_check(plan: &QuantaPlan, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(plan, tolerance, seed, grad_plan)
}

/// Same as [`grad_check`] with a caller-supplied analytic gradient.
pub fn grad_check_with<F>(plan: &QuantaPlan, tolerance: f64, seed: u64, analytic: F) -> Result<GradCheckReport>
where
    F: Fn(&QuantaPlan, &[f64], &[f64]) -> Result<Vec<Matrix>>,
{
    ensure!(
        plan.input_len() <= MAX_CHECK_DIM && plan.output_len() <= MAX_CHECK_DIM,
        InvalidArgument,
        "finite differences limited to dimension {MAX_CHECK_DIM}"
    );
    let batch = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = Matrix::gaussian(batch, plan.input_len(), 1.0, &mut rng).into_vec();
    let us = Matrix::gaussian(batch, plan.output_len(), 1.0, &mut rng).into_vec();
    let grads = analytic(plan, &xs, &us)?;
    ensure!(grads.len() == plan.gate_count(), DimensionMismatch, "one gradient per gate expected");

    let loss = |p: &QuantaPlan| -> Result<f64> {
        Ok(p.apply(&xs)?.iter().zip(&us).map(|(y, u)| y * u).sum())
    };
    let scale = grads.iter().fold(0.0f64, |m, g| m.max(g.max_abs()));
    let mut work = plan.clone();
    let mut report = GradCheckReport {
        params_checked: 0,
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst_gate: 0,
        worst_entry: 0,
        tolerance,
        passed: false,
    };
    for (k, g) in grads.iter().enumerate() {
        ensure!(
            g.shape() == plan.gates()[k].tensor.shape(),
            DimensionMismatch,
            "gradient {k} has the wrong extent"
        );
        for e in 0..g.as_slice().len() {
            let orig = work.gate_data_mut(k)?[e];
            work.gate_data_mut(k)?[e] = orig + FD_STEP;
            let plus = loss(&work)?;
            work.gate_data_mut(k)?[e] = orig - FD_STEP;
            let minus = loss(&work)?;
            work.gate_data_mut(k)?[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = g.as_slice()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_gate = k;
                report.worst_entry = e;
            }
            report.params_checked += 1;
        }
    }
    report.passed = report.max_relative_error <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{build_plan, identity_plan, PlanScheme};
    use crate::tensor::AxisShape;

    #[test]
    fn identity_and_random_plans_pass() {
        let s = AxisShape::new(vec![2, 2, 2]).unwrap();
        let id = grad_check(&identity_plan(&s, &PlanScheme::AllPairs).unwrap(), 1e-6, 1).unwrap();
        assert!(id.passed, "{id:?}");
        let r = grad_check(&build_plan(&s, &PlanScheme::AllPairs, 3, 1.0).unwrap(), 1e-6, 2).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.params_checked, 48);
    }

    #[test]
    fn corrupted_adjoint_fails() {
        let s = AxisShape::new(vec![2, 2, 2]).unwrap();
        let p = build_plan(&s, &PlanScheme::AllPairs, 4, 1.0).unwrap();
        let corrupted = |p: &QuantaPlan, x: &[f64], u: &[f64]| {
            let mut g = grad_plan(p, x, u)?;
            g[1] = g[1].transpose();
            Ok(g)
        };
        assert!(!grad_check_with(&p, 1e-6, 5, corrupted).unwrap().passed);
    }

    #[test]
    fn large_plans_are_refused() {
        let s = AxisShape::new(vec![16, 8]).unwrap();
        assert!(grad_check(&identity_plan(&s, &PlanScheme::AllPairs).unwrap(), 1e-6, 0).is_err());
    }
}
