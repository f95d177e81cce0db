//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of tensors, losses and metrics.
///
/// Implemented for `f32` and `f64`. The pipeline defaults to `f64`; the
/// finite-difference tolerances in the test suite assume double precision.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-for-f64 conversion from a double literal.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Real type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert a count to the scalar type.
pub(crate) fn count<T: Real>(n: usize) -> T {
    T::from_usize(n).expect("count fits in a float")
}
