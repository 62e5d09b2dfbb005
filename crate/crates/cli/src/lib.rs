//! Command implementations behind the `robustforge` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod presets;

pub use config::{ExperimentConfig, Overrides};
pub use error::CliError;
