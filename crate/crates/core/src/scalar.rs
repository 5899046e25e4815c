//! Scalar abstraction for the math core.
//!
//! Tensor ops, the network, the mixture model and the spectral embedding are
//! generic over [`Scalar`] so the same kernels compile for `f32` and `f64`.
//! The pipeline itself runs on the `f64` aliases exported from the crate root.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable by every numeric kernel in this crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Lossy cast from `f64`, for literals and schedule constants.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    /// `c = a * b` with explicit row/column strides on both operands, so the
    /// same kernel serves plain and transposed products. `c` is overwritten
    /// and must be `m * n` row-major.
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );

    /// Row-major `c = a(m x k) * b(k x n)`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), m * k, "gemm: lhs length");
        assert_eq!(b.len(), k * n, "gemm: rhs length");
        Self::gemm_strided(m, k, n, a, k as isize, 1, b, n as isize, 1, c);
    }

    /// Row-major `c = a(m x k) * b^T` where `b` is stored `n x k`.
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), m * k, "gemm_nt: lhs length");
        assert_eq!(b.len(), n * k, "gemm_nt: rhs length");
        Self::gemm_strided(m, k, n, a, k as isize, 1, b, 1, k as isize, c);
    }

    /// Row-major `c = a^T * b(k x n)` where `a` is stored `k x m`.
    fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), k * m, "gemm_tn: lhs length");
        assert_eq!(b.len(), k * n, "gemm_tn: rhs length");
        Self::gemm_strided(m, k, n, a, 1, m as isize, b, n as isize, 1, c);
    }
}

impl Scalar for f32 {
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    ) {
        assert_eq!(c.len(), m * n, "gemm: out length");
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            c.fill(0.0);
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    ) {
        assert_eq!(c.len(), m * n, "gemm: out length");
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            c.fill(0.0);
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Stable ascending log-sum-exp of a slice; `-inf` for an empty input.
pub fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    let hi = xs.iter().cloned().fold(F::neg_infinity(), F::max);
    if !hi.is_finite() {
        return hi;
    }
    let mut acc = F::zero();
    for &x in xs {
        acc += (x - hi).exp();
    }
    hi + acc.ln()
}
