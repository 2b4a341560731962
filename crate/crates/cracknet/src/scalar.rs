//! Scalar abstraction over the two supported element types.
//!
//! Training runs in `f32`; the gradient and oracle tests instantiate the same
//! code at `f64` so finite-difference checks can be held to tight tolerances.

use std::fmt::{Debug, Display};

/// Element type of tensors and model parameters.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Gauss error function, used by the exact GELU.
    fn erf(self) -> Self;

    fn from_f64(x: f64) -> Self;

    fn to_f64c(self) -> f64;
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64c(self) -> f64 {
        self
    }
}
