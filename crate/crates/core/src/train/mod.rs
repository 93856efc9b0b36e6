//! Adam training loop, checkpoints, configuration and multi-seed experiments.

mod config;
mod experiment;
mod trainer;

pub use config::{TrainConfig, CONFIG_KEYS};
pub use experiment::{evaluate, evaluate_with, DEFAULT_EVAL_DRAWS, mean_std, run_experiment, run_seed, Evaluation, ExperimentSummary, RunResult};
pub use trainer::{resolve_dataset, train, Checkpoint, LossLog, Trainer, CHECKPOINT_VERSION};
