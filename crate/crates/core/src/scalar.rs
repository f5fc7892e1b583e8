//! Scalar abstraction shared by the measure geometry and the LP oracle.
//!
//! Everything that only needs field arithmetic and an order (W1 sweeps,
//! couplings, the dense simplex method) is written against [`Scalar`], so the
//! same code runs on `f64` for speed and on [`BigRational`] when an instance
//! has to be settled exactly.

use std::fmt::{Debug, Display};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};

/// Ordered field element usable by the generic numerics of this crate.
pub trait Scalar:
    Num + Signed + Clone + Debug + Display + PartialOrd + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Threshold below which a pivot or reduced cost is treated as zero.
    /// Exact types return zero.
    fn pivot_tolerance() -> Self;

    /// Converts an `f64` constant (tolerances, user input). Panics on NaN.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant")
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn is_exact() -> bool {
        false
    }

    /// `|a - b| <= tol`, with `tol` given in `f64` units.
    fn close(a: &Self, b: &Self, tol: f64) -> bool {
        (a.clone() - b.clone()).abs() <= Self::from_f64_lossy(tol)
    }

    fn max_of(a: Self, b: Self) -> Self {
        if a >= b {
            a
        } else {
            b
        }
    }

    fn min_of(a: Self, b: Self) -> Self {
        if a <= b {
            a
        } else {
            b
        }
    }
}

impl Scalar for f64 {
    fn pivot_tolerance() -> Self {
        1e-9
    }
}

impl Scalar for f32 {
    fn pivot_tolerance() -> Self {
        1e-5
    }
}

impl Scalar for BigRational {
    fn pivot_tolerance() -> Self {
        BigRational::from_integer(BigInt::from(0))
    }

    fn is_exact() -> bool {
        true
    }

    fn close(a: &Self, b: &Self, tol: f64) -> bool {
        // exact types ignore the float tolerance only when it is zero
        if tol == 0.0 {
            a == b
        } else {
            (a - b).abs() <= Self::from_f64_lossy(tol)
        }
    }
}

/// Builds the rational `num / den`.
pub fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Sums a slice of scalars starting from zero.
pub fn sum<S: Scalar>(xs: &[S]) -> S {
    xs.iter().cloned().fold(S::zero(), |acc, x| acc + x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Zero;

    #[test]
    fn rational_is_exact() {
        let third = ratio(1, 3);
        let total = sum(&[third.clone(), third.clone(), third]);
        assert_eq!(total, ratio(1, 1));
        assert!(BigRational::is_exact());
        assert!(BigRational::pivot_tolerance().is_zero());
    }

    #[test]
    fn float_close() {
        assert!(f64::close(&0.1, &(0.3 - 0.2), 1e-12));
        assert!(!f64::close(&0.1, &0.2, 1e-12));
        assert!(f32::close(&0.5, &0.5, 0.0));
    }
}
