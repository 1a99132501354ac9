//! Synthetic weight-update recovery: fit an adapter so that the adapted
//! layer reproduces `(W0 + delta_star) x` on Gaussian inputs, then measure
//! how close the learned update is to `delta_star`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::grad_lora;
use super::optim::{LrSchedule, Optimizer, OptimizerKind};
use crate::adapted::{batch_matvec, AdaptedLinear, AdapterForm};
use crate::analysis::rank::singular_values;
use crate::error::{ensure, Error, Result};
use crate::lora::LoraAdapter;
use crate::matrix::Matrix;
use crate::plan::{build_plan, resize_rows, PlanScheme};
use crate::tensor::AxisShape;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub w0: Matrix,
    pub delta_star: Matrix,
    pub rank_of_delta: usize,
    pub seed: u64,
}

impl SyntheticTask {
    /// Square task of dimension `dim`. `delta_star` is a full Gaussian
    /// matrix when `rank >= dim`, otherwise a sum of `rank` random outer
    /// products. Entries have variance about `1/dim` either way.
    pub fn new(dim: usize, rank: usize, seed: u64) -> Result<Self> {
        ensure!(dim >= 1 && rank >= 1, InvalidArgument, "dimension and rank must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (dim as f64).sqrt();
        let w0 = Matrix::gaussian(dim, dim, std, &mut rng);
        let (delta_star, rank) = if rank >= dim {
            (Matrix::gaussian(dim, dim, std, &mut rng), dim)
        } else {
            let u = Matrix::gaussian(dim, rank, 1.0 / (rank as f64).sqrt(), &mut rng);
            let v = Matrix::gaussian(rank, dim, std, &mut rng);
            (u.matmul(&v)?, rank)
        };
        Ok(Self { w0, delta_star, rank_of_delta: rank, seed })
    }

    pub fn dim(&self) -> usize {
        self.w0.rows()
    }

    /// Smallest relative Frobenius error any rank-`r` matrix can reach
    /// against `delta_star`: `sqrt(sum_{k > r} s_k^2) / ||delta_star||_F`.
    pub fn low_rank_floor(&self, r: usize) -> Result<f64> {
        eckart_young_floor(&self.delta_star, r)
    }
}

pub fn eckart_young_floor(m: &Matrix, r: usize) -> Result<f64> {
    let sv = singular_values(m)?;
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let tail: f64 = sv.iter().skip(r).map(|s| s * s).sum();
    Ok(if total == 0.0 { 0.0 } else { (tail / total).sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AdapterKind {
    Lora {
        rank: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Quanta {
        shape: AxisShape,
        #[serde(default = "default_rounds")]
        rounds: usize,
        #[serde(default = "default_init_scale")]
        init_scale: f64,
    },
}

fn default_alpha() -> f64 {
    crate::lora::DEFAULT_ALPHA
}

fn default_rounds() -> usize {
    1
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-2
}

fn default_batch() -> usize {
    64
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: default_lr(),
            schedule: LrSchedule::default(),
            steps, batch_size: default_batch(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Config, "steps must be at least 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be positive"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub adapter: String,
    pub seed: u64,
    pub param_count: usize,
    /// `(step, loss)` for every step, 1-based.
    pub loss_curve: Vec<(usize, f64)>,
    pub recovery_error: f64,
    pub wall_clock_secs: f64,
}

/// Equality over everything a seeded run determines; wall-clock time is
/// ignored.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.adapter == other.adapter
            && self.seed == other.seed
            && self.param_count == other.param_count
            && self.loss_curve == other.loss_curve
            && self.recovery_error.to_bits() == other.recovery_error.to_bits()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedAdapter {
    Lora(LoraAdapter),
    Quanta(AdaptedLinear),
}

impl TrainedAdapter {
    /// The learned update as a dense matrix.
    pub fn delta(&self, w0: &Matrix) -> Result<Matrix> {
        match self {
            TrainedAdapter::Lora(l) => Ok(l.delta_matrix()),
            TrainedAdapter::Quanta(a) => a.merge()?.sub(w0),
        }
    }
}

pub fn run_recovery(task: &SyntheticTask, kind: &AdapterKind, config: &TrainConfig) -> Result<(TrainReport, TrainedAdapter)> {
    config.validate()?;
    let d = task.dim();
    let start = Instant::now();
    let mut adapter = match kind {
        AdapterKind::Lora { rank, alpha } => {
            ensure!(*rank >= 1, Config, "LoRA rank must be positive");
            TrainedAdapter::Lora(LoraAdapter::new(d, d, *rank, *alpha, config.seed))
        }
        AdapterKind::Quanta { shape, rounds, init_scale } => {
            ensure!(shape.total() == d, Config, "axis shape {shape} does not factor dimension {d}");
            ensure!(*rounds >= 1, Config, "rounds must be at least 1");
            let plan = build_plan(shape, &PlanScheme::Stacked { rounds: *rounds }, config.seed, *init_scale)?;
            TrainedAdapter::Quanta(AdaptedLinear::new(task.w0.clone(), &plan, AdapterForm::Merged)?)
        }
    };
    let (label, param_count) = match (&adapter, kind) {
        (TrainedAdapter::Lora(l), AdapterKind::Lora { rank, .. }) => (format!("lora-r{rank}"), l.param_count()),
        (TrainedAdapter::Quanta(a), AdapterKind::Quanta { shape, rounds, .. }) => {
            (format!("quanta-{shape}-x{rounds}"), a.plan().param_count())
        }
        _ => unreachable!(),
    };

    let target_w = task.w0.add(&task.delta_star)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let batch = config.batch_size;
    let norm = 1.0 / (batch * d) as f64;
    let mut loss_curve = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let xs = Matrix::gaussian(batch, d, 1.0, &mut rng).into_vec();
        let target = batch_matvec(&target_w, &xs)?;
        opt.set_learning_rate(config.schedule.rate(config.learning_rate, step, config.steps));
        opt.begin_step();
        let loss = match &mut adapter {
            TrainedAdapter::Lora(l) => {
                let mut y = batch_matvec(&task.w0, &xs)?;
                for (yi, di) in y.iter_mut().zip(l.apply(&xs)?) {
                    *yi += di;
                }
                let (loss, upstream) = mse(&y, &target, norm);
                check_loss(step, loss)?;
                let g = grad_lora(l, &xs, &upstream)?;
                opt.update(0, l.a.as_mut_slice(), g.a.as_slice());
                opt.update(1, l.b.as_mut_slice(), g.b.as_slice());
                loss
            }
            TrainedAdapter::Quanta(layer) => {
                let plan = layer.plan();
                let states = plan.forward_trace(&xs)?;
                let last = states.last().expect("non-empty trace");
                let t = resize_rows(last, batch, plan.out_shape().total(), plan.output_len());
                let mut y = batch_matvec(layer.base(), &xs)?;
                for (yi, ti) in y.iter_mut().zip(&t) {
                    *yi += ti;
                }
                let (loss, upstream) = mse(&y, &target, norm);
                check_loss(step, loss)?;
                let (_, grads) = plan.backward(&states, &upstream)?;
                let plan = layer.plan_mut();
                for (k, g) in grads.iter().enumerate() {
                    opt.update(k, plan.gate_data_mut(k)?, g.as_slice());
                }
                loss
            }
        };
        loss_curve.push((step, loss));
    }

    let delta = adapter.delta(&task.w0)?;
    delta.check_finite("learned update")?;
    let recovery_error = delta.sub(&task.delta_star)?.frobenius_norm() / task.delta_star.frobenius_norm();
    let report = TrainReport {
        adapter: label,
        seed: config.seed,
        param_count,
        loss_curve,
        recovery_error,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((report, adapter))
}

/// Mean squared error and its gradient with respect to `y`.
fn mse(y: &[f64], target: &[f64], norm: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let upstream = y
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let r = a - b;
            loss += r * r;
            2.0 * norm * r
        })
        .collect();
    (loss * norm, upstream)
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        log::error!("training diverged at step {step} (loss {loss})");
        Err(Error::Diverged { step, loss })
    }
}
