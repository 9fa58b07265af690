//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Protection constant for the square-root and logarithm operators.
pub const PROTECT_EPS: f64 = 1e-7;

/// A real scalar the engine can compute with: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Row-major product `op(a) · op(b)` where `op` optionally transposes.
    /// `op(a)` is `m×k` and `op(b)` is `k×n`; `a` is stored `k×m` when `ta`,
    /// `b` is stored `n×k` when `tb`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool) -> Vec<Self>;

    /// Lossless-enough conversion from an `f64` literal.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Row and column strides of an `r×c` logical operand.
fn strides(transposed: bool, r: usize, c: usize) -> (isize, isize) {
    if transposed {
        (1, r as isize)
    } else {
        (c as isize, 1)
    }
}

impl Scalar for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool) -> Vec<f32> {
        assert!(a.len() == m * k && b.len() == k * n, "gemm operand length");
        if m == 0 || n == 0 || k == 0 {
            return vec![0.0; m * n];
        }
        let (rsa, csa) = strides(ta, m, k);
        let (rsb, csb) = strides(tb, k, n);
        let mut c = Vec::with_capacity(m * n);
        // SAFETY: operand lengths are checked; with beta = 0 the output is
        // write-only, so the reserved buffer need not be initialized.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
            c.set_len(m * n);
        }
        c
    }
}

impl Scalar for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        assert!(a.len() == m * k && b.len() == k * n, "gemm operand length");
        if m == 0 || n == 0 || k == 0 {
            return vec![0.0; m * n];
        }
        let (rsa, csa) = strides(ta, m, k);
        let (rsb, csb) = strides(tb, k, n);
        let mut c = Vec::with_capacity(m * n);
        // SAFETY: operand lengths are checked; with beta = 0 the output is
        // write-only, so the reserved buffer need not be initialized.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
            c.set_len(m * n);
        }
        c
    }
}

/// `x₁ / √(1 + x₂²)`, computed with `hypot` so large `x₂` cannot overflow.
#[inline]
pub fn analytic_quotient<T: Scalar>(numerator: T, denominator: T) -> T {
    numerator / T::one().hypot(denominator)
}

/// `√(|x| + ε)`.
#[inline]
pub fn protected_sqrt<T: Scalar>(x: T, eps: T) -> T {
    (x.abs() + eps).sqrt()
}

/// `ln(|x| + ε)`.
#[inline]
pub fn protected_ln<T: Scalar>(x: T, eps: T) -> T {
    (x.abs() + eps).ln()
}

/// `ln(1 + eˣ)`, floored at the smallest positive normal so the result stays
/// strictly positive even where `eˣ` underflows.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    let v = if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    };
    v.max(T::min_positive_value())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sign with `sign(0) = 0`; the subgradient convention for `|x|` at the kink.
#[inline]
pub fn sign0<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
