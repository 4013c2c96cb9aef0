//! Experiment harness for the `ecrm` crate: configuration, sweeps, artifacts
//! and plots behind the `ecrm` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
