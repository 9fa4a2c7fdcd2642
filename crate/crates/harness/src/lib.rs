//! Experiment orchestration: TOML configs, training, direction discovery
//! for every method, evaluation reports and the loss ablation.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
