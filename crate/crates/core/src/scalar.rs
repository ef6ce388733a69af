//! Scalar abstraction: the engine is generic over the floating-point type.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar for tensors, statistics, and training math.
///
/// Implemented for `f32` and `f64`. Training defaults to `f64` (see the
/// crate-root aliases); checkpoints are stored as `f32`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for literals and config values.
    fn cast(v: f64) -> Self {
        num_traits::cast(v).expect("finite f64 converts to Scalar")
    }

    /// Widening conversion to `f64`.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
