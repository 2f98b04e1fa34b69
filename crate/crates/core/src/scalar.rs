//! Floating-point abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the quantization math is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Round to nearest integer, ties to even.
    fn round_even(self) -> Self {
        let floor = self.floor();
        let diff = self - floor;
        let half = Self::of(0.5);
        if diff > half {
            floor + Self::one()
        } else if diff < half {
            floor
        } else {
            let two = Self::of(2.0);
            if (floor / two).floor() * two == floor {
                floor
            } else {
                floor + Self::one()
            }
        }
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_even_ties() {
        let cases = [
            (0.5, 0.0),
            (1.5, 2.0),
            (2.5, 2.0),
            (-0.5, 0.0),
            (-1.5, -2.0),
            (-2.5, -2.0),
        ];
        for (x, want) in cases {
            assert_eq!(Scalar::round_even(x), want, "x = {x}");
            assert_eq!(Scalar::round_even(x as f32), want as f32, "x = {x}");
        }
    }

    #[test]
    fn round_even_non_ties() {
        assert_eq!(Scalar::round_even(2.49_f64), 2.0);
        assert_eq!(Scalar::round_even(2.51_f64), 3.0);
        assert_eq!(Scalar::round_even(-2.51_f64), -3.0);
        assert_eq!(Scalar::round_even(7.0_f64), 7.0);
    }

    #[test]
    fn agrees_with_std_ties_even() {
        let mut x = -8.0_f64;
        while x <= 8.0 {
            assert_eq!(Scalar::round_even(x), x.round_ties_even());
            x += 0.125;
        }
    }
}
