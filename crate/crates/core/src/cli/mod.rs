//! Experiment runner: configuration, metrics, checkpoints.

pub mod checkpoint;
pub mod config;
pub mod run;

pub use run::{exit_code, load_config, run, RunArgs, RunSummary};
