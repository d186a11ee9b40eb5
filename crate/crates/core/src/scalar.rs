//! Scalar abstraction for the numeric kernels.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! code instantiates at `f32` and `f64`. The helpers deliberately avoid the
//! `num_traits` method names (`from_f64`, `to_f64`) so call sites stay
//! unambiguous.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + NumAssignOps + Sum<Self> + Display + Debug + Default + Send + Sync + 'static
{
    /// Converts from `f64`, the type all configuration and RNG draws use.
    fn cast(x: f64) -> Self;
    /// Widens to `f64` for reporting and serialization.
    fn as_f64(self) -> f64;
}

impl<T> Scalar for T
where
    T: Float
        + NumAssignOps
        + FromPrimitive
        + ToPrimitive
        + Sum<T>
        + Display
        + Debug
        + Default
        + Send
        + Sync
        + 'static,
{
    fn cast(x: f64) -> Self {
        FromPrimitive::from_f64(x).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}
