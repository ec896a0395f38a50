//! Scalar abstractions.
//!
//! Numerical code (network, probes, projections) is generic over [`Scalar`],
//! implemented for `f32` and `f64`. The oracle's closed-form enumeration is
//! generic over [`Probability`], which additionally admits exact rationals.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type used by the differentiable parts of the crate.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; only fails for types that cannot hold
    /// finite doubles, which neither implementation does.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Strided `C = alpha * A * B + beta * C` with `A: m×k`, `B: k×n`.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the stated shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Value type for probabilities produced by exact enumeration.
pub trait Probability:
    Clone + PartialOrd + Debug + num_traits::Num + std::ops::Neg<Output = Self>
{
    /// Converts a configuration probability (stored as `f64`).
    fn from_prob(p: f64) -> Self;
    fn to_prob(&self) -> f64;
}

impl Probability for f64 {
    fn from_prob(p: f64) -> Self {
        p
    }
    fn to_prob(&self) -> f64 {
        *self
    }
}

impl Probability for f32 {
    fn from_prob(p: f64) -> Self {
        p as f32
    }
    fn to_prob(&self) -> f64 {
        f64::from(*self)
    }
}

impl Probability for Ratio<i64> {
    /// Uses the simplest fraction that round-trips through `f64`, so `0.3`
    /// becomes exactly `3/10`.
    fn from_prob(p: f64) -> Self {
        Ratio::approximate_float(p).expect("probability is finite")
    }
    fn to_prob(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Exact rational probabilities.
pub type Rational = Ratio<i64>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_conversion_is_exact_for_decimal_literals() {
        assert_eq!(Rational::from_prob(0.3), Rational::new(3, 10));
        assert_eq!(Rational::from_prob(0.9), Rational::new(9, 10));
        assert_eq!(Rational::from_prob(0.5).to_prob(), 0.5);
    }

    #[test]
    fn scalar_roundtrip() {
        assert_eq!(f32::of(0.25).as_f64(), 0.25);
        assert_eq!(f64::of(1e-300), 1e-300);
    }
}
