//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`] so the engine works at f32 or
//! f64. The training/attack pipelines use the f64 aliases exported from the
//! crate root: finite-difference gradient checks at 1e-4 relative tolerance
//! are not meaningful at f32.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (used for config constants like thresholds).
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant must convert")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable logistic function: finite for the whole input range.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Mathematical sign: -1, 0, or +1. `sign(0) = 0`, so a zero-gradient
/// coordinate is left untouched by sign-based perturbations.
pub fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(stable_sigmoid(0.0f64), 0.5);
        assert!((stable_sigmoid(40.0f64) - 1.0).abs() < 1e-12);
        assert!(stable_sigmoid(-40.0f64).abs() < 1e-12);
        assert!(stable_sigmoid(-1e6f64).is_finite());
        assert!(stable_sigmoid(1e6f64).is_finite());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0f64), 0.0);
        assert_eq!(sign(3.5f64), 1.0);
        assert_eq!(sign(-0.1f64), -1.0);
    }
}
