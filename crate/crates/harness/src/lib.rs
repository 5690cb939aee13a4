//! Experiment driver for continual self-supervised speech pretraining:
//! configuration, synthetic and recorded corpora, the task-sequence loop and
//! its reports.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod driver;
pub mod embeddings;
pub mod error;
pub mod wav;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
