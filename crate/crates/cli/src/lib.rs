//! Experiment driver: configuration files, DSK1 checkpoints, result CSVs and
//! the parallel scenario grid, shared by the `wmh-transfer` binary and the
//! acceptance suite.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod grid;
pub mod results;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
