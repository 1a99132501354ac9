//! TOML experiment configuration for the recovery task.
//!
//! ```toml
//! seed = 7
//!
//! [task]
//! dim = 64
//! delta_rank = 32
//!
//! [adapter]
//! kind = "quanta"
//! shape = "4-4-4"
//! rounds = 6
//!
//! [train]
//! steps = 2000
//!
//! [output]
//! loss_csv = "loss.csv"
//! summary_json = "summary.json"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::train::{AdapterKind, LrSchedule, OptimizerKind, SyntheticTask, TrainConfig};

/// Mixed into the experiment seed to seed training, so the task and the
/// adapter never draw from the same stream.
pub const TRAIN_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub dim: usize,
    pub delta_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_lr() -> f64 {
    TrainConfig::new(1, 0).learning_rate
}

fn default_batch() -> usize {
    TrainConfig::new(1, 0).batch_size
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub loss_csv: Option<PathBuf>,
    pub summary_json: Option<PathBuf>,
    pub adapter_qtf: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub adapter: AdapterKind,
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.output.resolve_against(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.task.dim >= 1, Config, "task.dim must be positive");
        ensure!(
            self.task.delta_rank >= 1 && self.task.delta_rank <= self.task.dim,
            Config,
            "task.delta_rank must lie in 1..={}",
            self.task.dim
        );
        match &self.adapter {
            AdapterKind::Lora { rank, alpha } => {
                ensure!(*rank <= self.task.dim, Config, "LoRA rank {rank} exceeds dim {}", self.task.dim);
                ensure!(alpha.is_finite(), Config, "LoRA alpha must be finite");
            }
            AdapterKind::Quanta { shape, rounds, init_scale } => {
                ensure!(
                    shape.total() == self.task.dim,
                    Config,
                    "adapter shape {shape} has total {} but task.dim is {}",
                    shape.total(),
                    self.task.dim
                );
                ensure!(shape.rank() >= 2, Config, "adapter shape needs at least two axes");
                ensure!(*rounds >= 1, Config, "rounds must be at least 1");
                ensure!(init_scale.is_finite(), Config, "init_scale must be finite");
            }
        }
        self.train_config().validate()
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        SyntheticTask::new(self.task.dim, self.task.delta_rank, self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.train.optimizer,
            learning_rate: self.train.learning_rate,
            schedule: self.train.schedule,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            seed: self.seed ^ TRAIN_SEED_MIX,
        }
    }
}

impl OutputConfig {
    /// Makes relative paths relative to `dir`.
    pub fn resolve_against(&mut self, dir: &Path) {
        for p in [&mut self.loss_csv, &mut self.summary_json, &mut self.adapter_qtf].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}
