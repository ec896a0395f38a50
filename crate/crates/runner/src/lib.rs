//! Experiment runner for the pnpslab core: configuration, experiment
//! drivers, single-step commands and run records.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod plot;
pub mod record;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{RunError, RunResult};
pub use record::{Artifact, ExperimentOutput, RunRecord};
