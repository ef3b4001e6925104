//! Configuration, orchestration and reporting for the `mocolab` command.
//!
//! Each subcommand is a plain function over an [`ExperimentConfig`] and
//! [`RunOptions`], so integration tests drive the same code paths as the
//! binary.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod manifest;
pub mod pipeline;
pub mod plot;

pub use commands::{
    cmd_epoch_sweep, cmd_evaluate, cmd_finetune, cmd_plot, cmd_pretrain, cmd_similarity, cmd_synth_data, FinetuneArgs,
    FinetuneSource,
};
pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{cmd_experiment, ExperimentOutcome, RunOptions};
pub use manifest::RunManifest;
