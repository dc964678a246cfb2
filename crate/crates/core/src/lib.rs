//! Data-free joint channel pruning and weight quantization for small CNNs.
//!
//! Pruned channels are folded into the next layer as linear combinations of
//! the kept channels; quantized channels get a per-channel scale folded the
//! same way. Everything is computed from weights and BN statistics.

pub mod accounting;
pub mod error;
pub mod forward;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod quant;
pub mod reconstruct;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use forward::{forward, Tap};
pub use model::{Activation, BatchNormParams, ConvBlock, Layer, Linear, Network};
pub use pipeline::{compress, CompressionConfig, Report};
pub use prune::Criterion;
pub use tensor::Tensor;
