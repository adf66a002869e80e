//! Scalar abstraction for the numeric core.
//!
//! Everything under [`crate::linalg`], [`crate::model`] and the metric
//! functions in [`crate::eval`] is generic over this trait, so the same
//! kernels run at `f32` or `f64`. The pipeline itself uses `f64` (see the
//! aliases at the crate root).

use std::fmt;
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + ScalarOperand
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for constants like tolerances.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    /// Lossless-enough conversion from a count.
    fn from_usize_c(v: usize) -> Self {
        Self::from_usize(v).expect("count representable in scalar type")
    }
}

impl<T> Scalar for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + Sum
        + ScalarOperand
        + fmt::Debug
        + fmt::Display
        + Send
        + Sync
        + 'static
{
}
