//! Experiment driver for the consistency-learning lab: configuration,
//! run directories, resumable experiment matrices and result tables.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod tables;

pub use config::{parse_config, ExperimentConfig};
pub use error::CliError;
