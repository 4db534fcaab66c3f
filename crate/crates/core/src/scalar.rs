//! Scalar abstraction shared by the numerical modules.
//!
//! All model and dataset math is written against [`Scalar`] so the same code
//! runs in `f64` (the default, used by the benchmark runners) and `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating point type usable as the element of matrices, models and scores.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`. Values are always representable up to rounding.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }

    /// Conversion to `f64`.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("every Scalar converts to f64")
    }

    /// Conversion from a count.
    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

macro_rules! scalar_impl {
    ($($t:ty)*) => ($(
        impl Scalar for $t {}
    )*)
}

scalar_impl!(f32 f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions() {
        assert_eq!(<f32 as Scalar>::of(0.5), 0.5f32);
        assert_eq!(<f64 as Scalar>::of_usize(7), 7.0);
        assert_eq!(0.25f32.as_f64(), 0.25);
    }
}
