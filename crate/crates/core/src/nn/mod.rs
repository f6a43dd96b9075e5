//! The binary-weight CNN: float training with latent weights, and inference
//! on the simulated arrays.

pub mod dense;
pub mod hardware;
pub mod mnist;
pub mod network;
pub mod train;

pub use hardware::{forward_quantized, Backend, Hardware, HardwareManifest, HardwareMode, HwLayer, HwModel, QuantForward};
pub use mnist::{load_mnist, Dataset, MnistError};
pub use network::{binarize, BatchStats, ConvLayer, ConvSpec, Network, NetworkSpec};
pub use train::{train, EpochRecord, TrainConfig, TrainHistory, TrainOutcome, TrainSetup};

use thiserror::Error;

use crate::array::ArrayError;
use crate::pruning::PruneError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mnist(#[from] MnistError),
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
