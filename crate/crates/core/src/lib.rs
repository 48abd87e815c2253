//! Multi-source (hyperspectral + SAR/LiDAR) patch classification with
//! pooling-based frequency interaction and prototype cross-attention
//! compensation, built on a small binary64 reverse-mode tensor engine.
//!
//! Layout:
//! - [`tensor`]: tensor values, the recording tape, differentiable ops, Adam.
//! - [`model`]: the encoder (stems, frequency interaction blocks), the
//!   prototype compensation module, the refinement head and the losses.
//! - [`data`]: bundle I/O, PCA, normalization, patch extraction, synthetic scenes.
//! - [`train`]: training loop, checkpoints, metrics, map rendering.
//! - [`gradcheck`]: the finite-difference suite shared by tests and the CLI.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamSet, Tape, Tensor, Var};
