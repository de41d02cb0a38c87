use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating point scalar the numeric core is generic over.
///
/// `cast` is total for the constants used in this crate (all exactly
/// representable in both `f32` and `f64`), so it panics rather than
/// returning an `Option`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + Sum
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable")
    }

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}
