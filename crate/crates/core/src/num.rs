//! Scalar abstraction for the numeric pipeline.
//!
//! Everything numeric is generic over [`Real`] so the same code runs in
//! single precision for training and in double precision for gradient
//! verification. Random draws are always made in `f64` and converted,
//! so an `f32` run and an `f64` run see the same underlying sequence.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + FromStr + Send + Sync + Display + Debug + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for converting an `f64` constant into the active scalar type.
#[inline]
pub fn s<S: Real>(x: f64) -> S {
    S::from_f64(x).expect("f64 constant representable in scalar type")
}

/// Lossy view of a scalar as `f64`, for reporting and logging.
#[inline]
pub fn to_f64<S: Real>(x: S) -> f64 {
    x.to_f64().expect("scalar convertible to f64")
}
