//! Convolutional vision Transformer (CvT) reference implementation.
//!
//! The crate is organized around five pieces:
//!
//! - [`tensor`]: a dense tensor library with reverse-mode autodiff, matmul,
//!   and grouped 2-D convolution — everything the model needs, nothing more.
//! - [`layers`]: the convolutional token embedding, the depthwise-separable
//!   convolutional projection for attention, and the transformer block built
//!   from them.
//! - [`model`]: the three-stage hierarchy, the published presets
//!   (CvT-13/21/W24), and checkpoint serialization.
//! - [`analysis`]: a static analyzer that reproduces per-layer parameter and
//!   FLOP counts plus shape traces from a config alone, and enumerates the
//!   stride/MLP-ratio search space.
//! - [`train`]: a toy training harness (AdamW, cosine schedule, synthetic
//!   classification task) proving the architecture learns end to end.

pub mod analysis;
pub mod error;
pub mod float;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{CvtError, Result};
pub use float::Float;
pub use tensor::Tensor;
