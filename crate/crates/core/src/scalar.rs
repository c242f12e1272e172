//! Floating-point scalar abstraction shared by every numeric kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by the tensor kernels, the STFT and the model.
///
/// Implemented for `f32` and `f64`. Training and all tolerance-bearing checks
/// run at `f64`; `f32` exists for cheap inference experiments.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + rustfft::FftNum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal; exact for `f64`, rounded for `f32`.
    fn lit(v: f64) -> Self;

    /// Widening conversion used by the binary file formats.
    fn to_f64_exact(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_exact(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_exact(self) -> f64 {
        self
    }
}

/// Shorthand for [`Scalar::lit`].
#[inline]
pub fn lit<S: Scalar>(v: f64) -> S {
    S::lit(v)
}
