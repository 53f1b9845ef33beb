//! Pruning, quantization-aware training and in-place teacher distillation
//! for small classifiers, on a self-contained reverse-mode autograd core.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod export;
pub mod format;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prune;
pub mod quant;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::TrainConfig;
pub use error::{PqkError, Result};
pub use model::{build_model, ArchConfig, Model, Path, Phase, QuantConfig};
pub use tensor::Tensor;
