//! Bidirectional convolutional LSTM classifier for hyperspectral image cubes.
//!
//! Every forward operator has a hand-written backward pass; there is no
//! autodiff graph. Layout:
//!
//! - [`tensor`], [`rng`]: dense `f64` tensors and a counter-based generator.
//! - [`nn`]: convolution, pooling, dropout, dense and softmax operators.
//! - [`clstm`]: the convolutional LSTM cell, its unrolled layer and BPTT.
//! - [`model`]: the two-direction network with its classification head.
//! - [`data`]: cube files, patch extraction, augmentation, splits, synthesis.
//! - [`train`]: optimizers, the training loop and the gradient checker.
//! - [`metrics`]: confusion matrices, accuracy and kappa, map rendering.
//! - [`checkpoint`]: the on-disk parameter container.

pub mod checkpoint;
pub mod clstm;
pub mod data;
pub mod error;
mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
