pub mod grad;
pub mod gradcheck;
pub mod optim;
pub mod recovery;

pub use grad::{grad_lora, grad_plan, LoraGrads};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use recovery::{eckart_young_floor, run_recovery, AdapterKind, SyntheticTask, TrainConfig, TrainReport, TrainedAdapter};
