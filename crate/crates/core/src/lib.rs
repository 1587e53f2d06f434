//! Holistic style injection for arbitrary style transfer.
//!
//! The crate provides a minimal dense NCHW tensor kernel, reverse-mode
//! autodiff over it, the holistic style injector transfer module alongside a
//! self-attention baseline, an encoder-decoder network, the training loss
//! suite, and a profiler that turns the linear-vs-quadratic complexity
//! distinction between the two transfer modules into measurable quantities.

pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod profiler;
pub mod stats;
pub mod tensor;
pub mod transfer;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
