//! Files, runs and the command line around `dacdet-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
