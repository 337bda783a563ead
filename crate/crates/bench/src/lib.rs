//! Experiment harness: configuration, adversaries, end-to-end runs and reports.

pub mod adversary;
pub mod config;
pub mod experiment;
pub mod report;

pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{run_experiment, write_outputs, ExperimentReport, Instance};
