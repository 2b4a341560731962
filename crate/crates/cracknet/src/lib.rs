//! Crack-segmentation toolkit: a self-contained differentiable tensor engine,
//! the attention variants behind TransUNet, SwinUNet and MTUNet, a UNet
//! baseline, the segmentation loss suite, confusion-based metrics with
//! training-curve statistics, a dataset pipeline with a synthetic crack
//! generator, and an Adam training loop.

pub mod error;
pub mod scalar;
pub mod tensor;
pub mod tape;
pub mod gradcheck;
pub mod attention;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Padding, Tape, Var};
pub use tensor::Tensor;
