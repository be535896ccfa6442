//! Scalar abstractions.
//!
//! Most of the numerics are written once against [`Scalar`] and instantiated
//! for `f64` (the default everywhere) and `f32`. Prospect weighting can also
//! run over exact rationals through the weaker [`Mass`] bound.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_rational::Ratio;
use num_traits::{Float, FloatConst, FromPrimitive, Num, ToPrimitive};

/// Floating point type usable by the policy, losses and trainer.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for the implementors.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + ToPrimitive
        + Sum
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Default
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Probability mass arithmetic: anything with field operations and an
/// order, plus a rule for deciding whether a total equals one.
pub trait Mass: Num + Copy + PartialOrd + Debug {
    fn is_unit(total: Self) -> bool;
}

impl Mass for f64 {
    fn is_unit(total: Self) -> bool {
        (total - 1.0).abs() <= 1e-12
    }
}

impl Mass for f32 {
    fn is_unit(total: Self) -> bool {
        (total - 1.0).abs() <= 1e-6
    }
}

impl Mass for Ratio<i64> {
    fn is_unit(total: Self) -> bool {
        total == Ratio::from_integer(1)
    }
}

impl Mass for Ratio<i128> {
    fn is_unit(total: Self) -> bool {
        total == Ratio::from_integer(1)
    }
}

/// Numerically stable `log(sigmoid(x))`.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Log-sum-exp with max subtraction.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_pieces_agree() {
        for &x in &[-40.0, -3.0, -1e-9, 0.0, 1e-9, 2.5, 40.0] {
            let s: f64 = sigmoid(x);
            assert!((log_sigmoid(x) - s.ln()).abs() < 1e-12);
            assert!((s + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_sum_exp_large_values() {
        let v = [1000.0f64, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v32 = [1.0f32, 2.0, 3.0];
        let naive = (1f32.exp() + 2f32.exp() + 3f32.exp()).ln();
        assert!((log_sum_exp(&v32) - naive).abs() < 1e-5);
    }
}
