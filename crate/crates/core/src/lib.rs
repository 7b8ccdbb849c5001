//! DDANet: a dual-decoder attention network for binary image segmentation,
//! built on a small reverse-mode automatic differentiation engine.
//!
//! One encoder feeds two decoders. The segmentation decoder predicts a mask;
//! the autoencoder decoder reconstructs a grayscale version of the input, and
//! at each intermediate stage its features are turned into a single-channel
//! attention map that gates the segmentation branch.
//!
//! Layout of the crate, bottom-up:
//!
//! - [`tensor`] / [`autodiff`]: dense tensors and the tape-based gradient engine.
//! - [`layers`]: convolutions, batch norm, residual and squeeze-and-excitation blocks.
//! - [`model`]: the full network and its configuration.
//! - [`loss`] / [`metrics`]: training objectives and evaluation metrics.
//! - [`data`]: image/mask loading, resizing, splitting and a synthetic generator.
//! - [`train`]: Adam, the training loop, checkpoints and evaluation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph};
pub use error::{Error, Result};
pub use model::{DDANet, ForwardOutput, ModelConfig};
pub use tensor::{Scalar, Tensor};
