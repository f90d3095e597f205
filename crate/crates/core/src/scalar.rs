//! Scalar abstraction shared by every numeric routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Debug + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into `T`.
#[inline(always)]
pub fn lit<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Lossy conversion to `f64`, used for diagnostics and output.
#[inline(always)]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[inline(always)]
pub(crate) fn neg_infinity<T: Scalar>() -> T {
    lit(f64::NEG_INFINITY)
}

#[inline(always)]
pub(crate) fn infinity<T: Scalar>() -> T {
    lit(f64::INFINITY)
}

/// `log(Σ exp(v_i))` evaluated around the maximum. Returns `-inf` when every
/// entry is `-inf` (or the slice is empty).
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let max = values
        .iter()
        .copied()
        .fold(neg_infinity::<T>(), |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return max;
    }
    let sum = values
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let v = [0.1_f64, -2.0, 3.5];
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_huge_magnitudes() {
        let v = [-1000.0_f64, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        let empty: [f64; 0] = [];
        assert_eq!(log_sum_exp(&empty), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn f32_supported() {
        let v = [1.0_f32, 1.0];
        assert!((log_sum_exp(&v) - (1.0 + 2f32.ln())).abs() < 1e-6);
    }
}
