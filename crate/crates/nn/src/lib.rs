//! A small, deterministic convolutional network engine.
//!
//! Everything is 64-bit and CPU-only. Layers cache what they need during
//! [`Layer::forward`] and consume it in [`Layer::backward`]; parameter
//! gradients accumulate into each parameter tensor's gradient slot.
//!
//! Batch-level parallelism goes through rayon. Every reduction across
//! samples is summed in sample order, so results do not depend on the size
//! of the thread pool.

mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod optim;
mod tensor;

pub use error::{NnError, Result};
pub use layers::{
    BatchNorm2d, Conv2d, ConvBlock, GlobalAvgPool, Layer, Linear, MaxPool2, Mode, Relu, Sequential,
};
pub use loss::{softmax, softmax_bce_loss};
pub use optim::Sgd;
pub use tensor::Tensor;
