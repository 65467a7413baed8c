//! Normalization layers on a minimal differentiable NCHW tensor core.
//!
//! - [`tensor`]: dense `(B, C, H, W)` storage, reductions and grouped views.
//! - [`layers`]: convolution, pooling, linear, loss, residual blocks, SGD and
//!   finite-difference gradient checking.
//! - [`norm`]: batch, channel-grouped (layer/group/instance), fixed-statistics,
//!   weight-standardized and batch-channel normalization.
//! - [`diagnostics`]: running channel statistics, StatDiff and the
//!   deactivated-channel probe.

pub mod diagnostics;
pub mod error;
mod gemm;
pub mod layers;
pub mod norm;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::{Layer, Mode};
pub use tensor::Tensor4;
