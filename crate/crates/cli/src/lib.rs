//! Experiment harness behind the `fog` binary.

pub mod config;
pub mod experiment;

pub use config::{ExperimentConfig, Overrides};
