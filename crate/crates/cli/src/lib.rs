//! Library surface of the `frl` command-line front end: configuration,
//! run manifests, and the pipeline commands (alphabet search, stage build,
//! decay/restriction/sharpness experiments, ternary comparison).

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
