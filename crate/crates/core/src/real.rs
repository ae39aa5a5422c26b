//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the tensor engine and the signal/clustering code.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }

    /// `C[m×n] += A[m×k] · B[k×n]` over strided views (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], rsa: usize, csa: usize, b: &[Self], rsb: usize, csb: usize, c: &mut [Self], rsc: usize, csc: usize) {
        for i in 0..m {
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                if av == Self::zero() {
                    continue;
                }
                for j in 0..n {
                    let o = &mut c[i * rsc + j * csc];
                    *o = *o + av * b[p * rsb + j * csb];
                }
            }
        }
    }
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &[T], (rsa, csa): (usize, usize), b: &[T], (rsb, csb): (usize, usize), c: &[T], (rsc, csc): (usize, usize)) {
    let last = |r: usize, cs: usize, rows: usize, cols: usize| if rows == 0 || cols == 0 { 0 } else { (rows - 1) * r + (cols - 1) * cs + 1 };
    assert!(a.len() >= last(rsa, csa, m, k) && b.len() >= last(rsb, csb, k, n) && c.len() >= last(rsc, csc, m, n), "gemm view out of bounds");
}

macro_rules! blas_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], rsa: usize, csa: usize, b: &[Self], rsb: usize, csb: usize, c: &mut [Self], rsc: usize, csc: usize) {
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                check_gemm(m, k, n, a, (rsa, csa), b, (rsb, csb), c, (rsc, csc));
                // SAFETY: every view was bounds-checked above and `c` does not alias `a` or `b`.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa as isize, csa as isize, b.as_ptr(), rsb as isize, csb as isize, 1.0, c.as_mut_ptr(), rsc as isize, csc as isize);
                }
            }
        }
    };
}

blas_real!(f32, matrixmultiply::sgemm);
blas_real!(f64, matrixmultiply::dgemm);

/// `log(exp(a) + exp(b))` without overflow; `-inf` is the identity.
#[inline]
pub fn log_add_exp<S: Real>(a: S, b: S) -> S {
    if a == S::neg_infinity() {
        return b;
    }
    if b == S::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Numerically stable log-sum-exp of a slice.
pub fn log_sum_exp<S: Real>(xs: &[S]) -> S {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<S>().ln()
}
