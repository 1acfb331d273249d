//! Scalar abstraction so the same model and loss code runs in `f32` for
//! training and `f64` for finite-difference verification.

use ndarray::LinalgScalar;
use num_traits::{Float, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable everywhere in the crate.
///
/// `LinalgScalar` keeps `ndarray`'s matrix multiply on the fast GEMM path for
/// both supported types.
pub trait Scalar:
    Float + NumAssign + LinalgScalar + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;

    /// Widening conversion; `Float: NumCast` makes this total.
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}
