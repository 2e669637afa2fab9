//! Floating-point scalar abstraction.
//!
//! All numerical kernels are generic over [`Scalar`] so that the same code
//! drives `f32` and `f64` lanes; concrete `f64` aliases live at the crate
//! root. The trait is a thin bundle of `num-traits` capabilities plus the
//! formatting bounds the reporting layer needs.

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

/// Scalar type for grid coordinates, field values, and weights.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Convert an `f64` literal; panics only for non-finite inputs, which
    /// indicates a programming error rather than a data condition.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal must convert")
    }

    /// Convert a `usize` exactly representable at desk scale.
    #[inline]
    fn of(n: usize) -> Self {
        Self::from_usize(n).expect("usize must convert to scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_convert_in_both_lanes() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.25), 0.25f32);
        assert_eq!(f64::of(17), 17.0);
        assert_eq!(f32::of(17), 17.0f32);
    }

    #[test]
    fn float_ops_available_through_trait() {
        fn hypot<S: Scalar>(a: S, b: S) -> S {
            (a * a + b * b).sqrt()
        }
        assert!((hypot(3.0f64, 4.0f64) - 5.0).abs() < 1e-15);
        assert!((hypot(3.0f32, 4.0f32) - 5.0).abs() < 1e-6);
    }
}
