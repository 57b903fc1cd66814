//! Training, evaluation and the synthetic data used by the toy profile.

pub mod config;
pub mod eval;
pub mod synthetic;
pub mod train;

pub use config::TrainConfig;
pub use eval::{
    ablate, ablation_variants, bench_checkpoints, bench_stylize, hstack, perceptual_distance, ssim,
    AblationReport, AblationRow, BenchReport, SsimConfig,
};
pub use train::{train_coarse, train_fine, trailing_mean, CoarseReport, FineReport};
