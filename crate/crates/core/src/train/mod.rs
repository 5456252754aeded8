//! Optimizer, schedule, training loop, experiment configs, checkpoints and
//! the experiment runner.

mod checkpoint;
mod config;
mod experiment;
mod optim;
mod trainer;

pub use checkpoint::{decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{DataSection, ExperimentConfig, ExperimentSection, StrategySection};
pub use experiment::{
    csv_string, initial_progress, ledger_for, parse_csv, resume_experiment, run_experiment, run_experiment_with,
    run_suite, run_task, CsvRow, PreparedData, Progress, RunArtifacts, TaskResult, CSV_HEADER, EVAL_BATCH,
    EVAL_SEED_SALT,
};
pub use optim::{adamw_step, lr_at, AdamW, Hyperparams, Moments};
pub use trainer::{derive_seed, train_task, trainable_gradients, StepRecord, TaskCurve};
