//! Experiment driver: configuration, commands and output layout.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Cli, Command};
pub use config::{ExperimentConfig, RunMethod};
pub use error::{CliError, CliResult};
