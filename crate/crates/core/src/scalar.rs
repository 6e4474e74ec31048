//! Scalar abstraction: the whole stack runs in `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps, NumCast};

/// Floating-point element type for tensors, models and attacks.
pub trait Scalar:
    Float + NumAssignOps + NumCast + Sum + Debug + Display + Send + Sync + Default + 'static
{
    /// Lossless-enough conversion for constants and thresholds.
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar fits in f64")
    }

    /// Storage conversion for the on-disk model format (always f32).
    fn to_f32_stored(self) -> f32 {
        <f32 as NumCast>::from(self).unwrap_or(f32::NAN)
    }

    fn from_f32_stored(v: f32) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// sign with the sign(0) = 0 convention used by every sign-step attack.
pub fn sign_zero<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}
