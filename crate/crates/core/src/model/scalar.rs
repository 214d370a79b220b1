//! Floating-point abstraction and strided matrix products.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of model tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    /// `c = alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// All pointers must be valid for every element addressed by the given
    /// shapes and strides, and `c` must not alias `a` or `b`.
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

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32;
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

    fn lit(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn as_f32(self) -> f32 {
        self
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

    fn lit(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F> View<'a, F> {
    /// Dense row-major `rows x cols` view over the start of `data`.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(span(rows, cols, rs, cs) <= data.len(), "view exceeds its buffer");
        Self { data, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Mutable strided matrix view.
pub struct ViewMut<'a, F> {
    data: &'a mut [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F> ViewMut<'a, F> {
    pub fn new(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(span(rows, cols, rs, cs) <= data.len(), "view exceeds its buffer");
        Self { data, rows, cols, rs, cs }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c = alpha * a * b + beta * c`. With `beta == 0` the old contents of `c`
/// are ignored, including NaNs.
pub fn gemm<F: Scalar>(alpha: F, a: View<'_, F>, b: View<'_, F>, beta: F, c: ViewMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "output rows differ");
    assert_eq!(b.cols, c.cols, "output cols differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v = if beta == F::zero() { F::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: the views were bounds-checked at construction, `c` is a unique
    // borrow so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense `c = a * b` for row-major `a: m x k`, `b: k x n`.
pub fn matmul<F: Scalar>(a: &[F], m: usize, k: usize, b: &[F], n: usize, c: &mut [F]) {
    gemm(F::one(), View::new(a, m, k), View::new(b, k, n), F::zero(), ViewMut::new(c, m, n));
}

/// `c += a^T * b` for row-major `a: m x k`, `b: m x n`; `c` is `k x n`.
pub fn matmul_tn_acc<F: Scalar>(a: &[F], m: usize, k: usize, b: &[F], n: usize, c: &mut [F]) {
    gemm(F::one(), View::new(a, m, k).t(), View::new(b, m, n), F::one(), ViewMut::new(c, k, n));
}

/// `c = a * b^T` for row-major `a: m x k`, `b: n x k`; `c` is `m x n`.
pub fn matmul_nt<F: Scalar>(a: &[F], m: usize, k: usize, b: &[F], n: usize, c: &mut [F]) {
    gemm(F::one(), View::new(a, m, k), View::new(b, n, k).t(), F::zero(), ViewMut::new(c, m, n));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn seq(n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + s) * 0.37).sin()).collect()
    }

    #[test]
    fn matmul_matches_naive_loops() {
        let (m, k, n) = (5, 7, 3);
        let a = seq(m * k, 1.0);
        let b = seq(k * n, 2.0);
        let mut c = vec![f64::NAN; m * n];
        matmul(&a, m, k, &b, n, &mut c);
        for (x, y) in c.iter().zip(naive(&a, m, k, &b, n)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_products() {
        let (m, k, n) = (4, 6, 5);
        let a = seq(m * k, 0.5);
        let b = seq(m * n, 3.0);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let expect = naive(&at, k, m, &b, n);
        let mut c = vec![1.0; k * n];
        matmul_tn_acc(&a, m, k, &b, n, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - 1.0 - y).abs() < 1e-12);
        }

        let b2 = seq(n * k, 4.0);
        let mut b2t = vec![0.0; k * n];
        for i in 0..n {
            for j in 0..k {
                b2t[j * n + i] = b2[i * k + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_nt(&a, m, k, &b2, n, &mut c2);
        for (x, y) in c2.iter().zip(naive(&a, m, k, &b2t, n)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_inner_dimension_clears_output() {
        let mut c = vec![f32::NAN; 6];
        matmul::<f32>(&[], 2, 0, &[], 3, &mut c);
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    #[should_panic(expected = "view exceeds")]
    fn oversized_view_panics() {
        let d = [0.0f32; 5];
        let _ = View::new(&d, 2, 3);
    }
}
