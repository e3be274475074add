//! Scalar abstraction shared by every numeric module.
//!
//! Production paths run in `f32`; `f64` exists for finite-difference checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for constants and initialisation draws.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("scalar converts to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// ReLU that lets NaN through so divergence is not masked.
pub fn relu<T: Scalar>(v: T) -> T {
    if v < T::zero() {
        T::zero()
    } else {
        v
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy of a logit against a 0/1 label, computed without
/// forming the probability so large logits stay finite.
pub fn bce_with_logit<T: Scalar>(z: T, label: T) -> T {
    // max(z, 0) - z*y + ln(1 + e^{-|z|})
    let zero = T::zero();
    z.max(zero) - z * label + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_log_sigmoid_for_positive_label() {
        for &z in &[-30.0f64, -3.5, -1e-3, 0.0, 0.7, 4.0, 25.0] {
            let expected = -sigmoid(z).ln();
            assert!((bce_with_logit(z, 1.0) - expected).abs() <= 1e-12, "z={z}");
            assert!(bce_with_logit(z, 0.0) >= 0.0);
        }
    }

    #[test]
    fn sigmoid_symmetry() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        let a = sigmoid(2.0f64);
        assert!((a + sigmoid(-2.0f64) - 1.0).abs() < 1e-15);
    }
}
