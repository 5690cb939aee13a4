//! Continual self-supervised speech representation learning.
//!
//! A convolutional frontend turns waveforms into latent frames, a transformer
//! context network predicts Gumbel-quantized targets at masked positions, and
//! CTC finetuning measures what the representation retains. Tasks arrive in
//! sequence; a [`continual::StrategyKind`] decides which parameters each task
//! may touch.

pub mod checkpoint;
pub mod continual;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod frontend;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod quantizer;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, TaskId};
