//! The floating point types every numeric routine in the crate is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// `f32` (neural path) or `f64` (theory and gradient verification).
pub trait Scalar:
    Float
    + FloatConst
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
    const NAME: &'static str;

    /// `c ← alpha·a·b + beta·c` over strided row/column views.
    ///
    /// # Safety
    ///
    /// Every element addressed through the strides must lie inside the
    /// corresponding buffer. Use [`gemm`] for the checked version.
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

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

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
    const NAME: &'static str = "f64";

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

/// A strided view into a slice: `(slice, offset, row stride, column stride)`.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major contiguous matrix with `cols` columns.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Same storage, read as its transpose.
    pub fn t(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn at(self, offset: usize) -> Self {
        View { offset, ..self }
    }

    fn check(&self, r: usize, c: usize, what: &str) {
        if r == 0 || c == 0 {
            return;
        }
        let last = self.offset + (r - 1) * self.rs + (c - 1) * self.cs;
        assert!(
            last < self.data.len(),
            "gemm operand {what} out of bounds: last index {last}, len {}",
            self.data.len()
        );
    }
}

/// Bounds-checked `c ← alpha·a·b + beta·c`, `a` is m×k, `b` is k×n, and `c`
/// is m×n stored at `c_off` with strides `(rsc, csc)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k, "a");
    b.check(k, n, "b");
    let last = c_off + (m - 1) * rsc + (n - 1) * csc;
    assert!(last < c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[c_off + i * rsc + j * csc];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: all addressed elements were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposed_operand() {
        // a: 2x3, b stored as 4x3 and read transposed (3x4)
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect();
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, View::rows(&a, 3), View::rows(&b, 3).t(), 0.0, &mut c, 0, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm(1, 2, 1, 1.0, View::rows(&a, 2), View::rows(&b, 1), 1.0, &mut c, 0, 1, 1);
        assert_eq!(c[0], 21.0);
    }
}
