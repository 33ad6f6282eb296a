//! Scalar abstraction for the floating-point parts of the pipeline.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating scalar used by the fitting and statistics code: `f32` or `f64`.
///
/// Time tags stay integer picoseconds throughout; this trait only covers
/// the real-valued math (peak profiles, least squares, stability
/// estimators). `f64` is the default everywhere in the pipeline.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` constants.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant")
    }

    /// Conversion from integer picoseconds.
    fn of_i64(x: i64) -> Self {
        Self::from_i64(x).expect("i64 fits scalar")
    }

    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("usize fits scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar fits f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
