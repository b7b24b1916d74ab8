use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the generic kernels run on (`f32` or `f64`).
///
/// Both `num_traits::Float` and nalgebra's `RealField` are required, so
/// ambiguous methods (`sqrt`, `abs`, ...) are called through `Float::` in
/// generic code.
pub trait Scalar:
    RealField + Float + FromPrimitive + ToPrimitive + Copy + Send + Sync + Debug + Display + 'static
{
    /// Convert an `f64` literal; panics only for non-representable input.
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
