pub mod accounting;
pub mod rank;
pub mod similarity;
pub mod universality;

pub use accounting::{param_fraction, total_trainable, LoraRank, ModelConfig, TrainableParams};
pub use rank::{numerical_rank, rank_bounds, RankReport, DEFAULT_RANK_TOLERANCE};
pub use similarity::{subspace_similarity, SimilarityGrid};
pub use universality::{universality_fit, universality_fit_with, FitOptions, FitResult};
