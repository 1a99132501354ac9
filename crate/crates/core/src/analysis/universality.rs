//! Empirical representability check: fit a stacked all-pairs circuit to a
//! dense target and report the best relative Frobenius residual.
//!
//! Each restart runs Adam on `||M - W||_F^2 / ||W||_F^2` and then polishes
//! with damped Gauss-Newton (Levenberg-Marquardt) steps, which converge to
//! machine precision when the target is exactly representable.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::plan::{build_plan, PlanScheme, QuantaPlan};
use crate::tensor::AxisShape;
use crate::train::optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub adam_steps: usize,
    pub learning_rate: f64,
    /// Levenberg-Marquardt iterations after the Adam phase. Skipped when
    /// the parameter count exceeds `max_lm_params`.
    pub lm_iterations: usize,
    /// The polish stops when the residual shrinks by less than
    /// `stall_ratio` over `stall_window` iterations.
    pub stall_window: usize,
    pub stall_ratio: f64,
    pub max_lm_params: usize,
    pub init_scale: f64,
    /// Stop a restart once its residual drops below this.
    pub target_residual: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            adam_steps: 500,
            learning_rate: 1e-2,
            lm_iterations: 6000,
            stall_window: 200,
            stall_ratio: 0.99,
            max_lm_params: 2048,
            init_scale: 1.0,
            target_residual: 1e-13,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub plan: QuantaPlan,
    /// `||materialize(plan) - target||_F / ||target||_F` of the best restart.
    pub residual: f64,
    pub best_restart: usize,
    pub restart_residuals: Vec<f64>,
    /// False when some axis extent is not a power of two.
    pub power_of_two_axes: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub residual: f64,
    pub best_restart: usize,
    pub restart_residuals: Vec<f64>,
    pub power_of_two_axes: bool,
    pub gate_count: usize,
    pub param_count: usize,
}

impl FitResult {
    pub fn summary(&self) -> FitSummary {
        FitSummary {
            residual: self.residual,
            best_restart: self.best_restart,
            restart_residuals: self.restart_residuals.clone(),
            power_of_two_axes: self.power_of_two_axes,
            gate_count: self.plan.gate_count(),
            param_count: self.plan.param_count(),
        }
    }
}

pub fn universality_fit(target: &Matrix, shape: &AxisShape, rounds: usize, restarts: usize, seed: u64) -> Result<FitResult> {
    universality_fit_with(target, shape, rounds, restarts, seed, &FitOptions::default())
}

pub fn universality_fit_with(
    target: &Matrix,
    shape: &AxisShape,
    rounds: usize,
    restarts: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<FitResult> {
    let d = shape.total();
    ensure!(
        target.shape() == (d, d),
        DimensionMismatch,
        "target is {}x{} but shape {shape} needs {d}x{d}",
        target.rows(),
        target.cols()
    );
    ensure!(rounds >= 1 && restarts >= 1, InvalidArgument, "rounds and restarts must be positive");
    target.check_finite("target")?;
    let power_of_two_axes = shape.dims().iter().all(|x| x.is_power_of_two());
    if !power_of_two_axes {
        log::warn!("axis shape {shape} has non power-of-two extents; outside the guaranteed regime");
    }

    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..restarts).map(|_| rand::Rng::random(&mut seeder)).collect();
    let runs: Vec<(QuantaPlan, f64)> = seeds
        .par_iter()
        .map(|&s| fit_once(target, shape, rounds, s, options))
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (k, (_, r)) in runs.iter().enumerate() {
        if *r < runs[best].1 {
            best = k;
        }
    }
    let restart_residuals = runs.iter().map(|(_, r)| *r).collect();
    let (plan, residual) = runs.into_iter().nth(best).expect("at least one restart");
    Ok(FitResult { plan, residual, best_restart: best, restart_residuals, power_of_two_axes })
}

/// Residual matrix `M - W` in the batch layout used by the plan: row `j`
/// holds column `j` of the operator.
fn residual_rows(plan: &QuantaPlan, target_t: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = plan.input_len();
    let states = plan.forward_trace(Matrix::identity(d).as_slice())?;
    let out = states.last().expect("non-empty").clone();
    let resid = out.iter().zip(target_t).map(|(m, w)| m - w).collect();
    Ok((states, resid))
}

fn rel_residual(resid: &[f64], target_norm: f64) -> f64 {
    resid.iter().map(|r| r * r).sum::<f64>().sqrt() / target_norm
}

fn flatten(plan: &QuantaPlan) -> Vec<f64> {
    plan.gates().iter().flat_map(|g| g.tensor.as_slice().iter().copied()).collect()
}

fn unflatten(plan: &mut QuantaPlan, theta: &[f64]) -> Result<()> {
    let mut off = 0;
    for k in 0..plan.gate_count() {
        let slot = plan.gate_data_mut(k)?;
        slot.copy_from_slice(&theta[off..off + slot.len()]);
        off += slot.len();
    }
    Ok(())
}

fn fit_once(target: &Matrix, shape: &AxisShape, rounds: usize, seed: u64, opts: &FitOptions) -> Result<(QuantaPlan, f64)> {
    let d = shape.total();
    let mut plan = build_plan(shape, &PlanScheme::Stacked { rounds }, seed, opts.init_scale)?;
    let target_t = target.transpose().into_vec();
    let tnorm = target.frobenius_norm().max(f64::MIN_POSITIVE);
    let scale = 2.0 / (tnorm * tnorm);

    let mut opt = Optimizer::new(OptimizerKind::Adam, opts.learning_rate);
    let mut best = (plan.clone(), f64::INFINITY);
    for _ in 0..opts.adam_steps {
        let (states, resid) = residual_rows(&plan, &target_t)?;
        let r = rel_residual(&resid, tnorm);
        if r < best.1 {
            best = (plan.clone(), r);
        }
        if r <= opts.target_residual || !r.is_finite() {
            break;
        }
        let upstream: Vec<f64> = resid.iter().map(|v| v * scale).collect();
        let (_, grads) = plan.backward(&states, &upstream)?;
        opt.begin_step();
        for (k, g) in grads.iter().enumerate() {
            opt.update(k, plan.gate_data_mut(k)?, g.as_slice());
        }
    }
    let (states, resid) = residual_rows(&plan, &target_t)?;
    let r = rel_residual(&resid, tnorm);
    drop(states);
    if r < best.1 {
        best = (plan.clone(), r);
    }

    if plan.param_count() <= opts.max_lm_params && best.1 > opts.target_residual {
        let mut plan = best.0.clone();
        let mut theta = flatten(&plan);
        let mut lambda = 1e-3;
        let mut nu = 2.0;
        let (_, mut resid) = residual_rows(&plan, &target_t)?;
        let mut cost: f64 = resid.iter().map(|v| v * v).sum();
        let mut checkpoint = cost;
        for it in 1..=opts.lm_iterations {
            let jac = jacobian(&plan, d)?;
            let r = DVector::from_column_slice(&resid);
            let mut accepted = false;
            for _ in 0..30 {
                let Some(step) = lm_step(&jac, &r, lambda) else {
                    lambda *= nu;
                    nu *= 2.0;
                    continue;
                };
                let predicted = cost - (&r - &jac * &step).norm_squared();
                let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t - s).collect();
                unflatten(&mut plan, &trial)?;
                let (_, trial_resid) = residual_rows(&plan, &target_t)?;
                let trial_cost: f64 = trial_resid.iter().map(|v| v * v).sum();
                let rho = (cost - trial_cost) / predicted;
                if trial_cost.is_finite() && trial_cost < cost && rho > 0.0 {
                    theta = trial;
                    resid = trial_resid;
                    cost = trial_cost;
                    lambda = (lambda * (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3))).max(1e-18);
                    nu = 2.0;
                    accepted = true;
                    break;
                }
                lambda *= nu;
                nu *= 2.0;
            }
            unflatten(&mut plan, &theta)?;
            log::trace!("lm cost {:.3e} lambda {lambda:.1e} accepted {accepted}", cost.sqrt() / tnorm);
            if !accepted || cost.sqrt() / tnorm <= opts.target_residual {
                break;
            }
            if opts.stall_window > 0 && it % opts.stall_window == 0 {
                if cost.sqrt() > opts.stall_ratio * checkpoint.sqrt() {
                    break;
                }
                checkpoint = cost;
            }
        }
        let r = cost.sqrt() / tnorm;
        if r < best.1 {
            best = (plan, r);
        }
    }
    Ok(best)
}

/// Damped Gauss-Newton step `(J^T J + lambda I)^{-1} J^T r`, solved in
/// whichever of parameter or residual space is smaller.
fn lm_step(jac: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let jt = jac.transpose();
    if jac.ncols() <= jac.nrows() {
        let mut a = &jt * jac;
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        Some(a.cholesky()?.solve(&(&jt * r)))
    } else {
        let mut a = jac * &jt;
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        Some(&jt * a.cholesky()?.solve(r))
    }
}

/// Jacobian of the operator entries `M[i][j]`, ordered column by column to
/// match the batch layout of the residual, with respect to the
/// flattened gate parameters.
fn jacobian(plan: &QuantaPlan, d: usize) -> Result<DMatrix<f64>> {
    let n_params = plan.param_count();
    let mut jac = DMatrix::<f64>::zeros(d * d, n_params);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let states = plan.forward_trace(&e)?;
        for i in 0..d {
            let mut u = vec![0.0; d];
            u[i] = 1.0;
            let (_, grads) = plan.backward(&states, &u)?;
            let mut col = 0;
            for g in &grads {
                for &v in g.as_slice() {
                    jac[(j * d + i, col)] = v;
                    col += 1;
                }
            }
        }
    }
    Ok(jac)
}
