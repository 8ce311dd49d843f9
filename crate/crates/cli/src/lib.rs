//! Experiment files, checkpoints and the `saff` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
