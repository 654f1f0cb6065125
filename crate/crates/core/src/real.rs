//! Scalar precision abstraction.
//!
//! Training runs in `f32`; every oracle and gradient check runs in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + rustfft::FftNum
    + 'static
{
    const BITS: u32;

    /// `C = alpha * A * B + beta * C` with arbitrary element strides.
    ///
    /// # Safety
    /// Every index reachable through the given dims and strides must lie
    /// inside the corresponding allocation.
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

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 converts to every Real")
    }

    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("Real converts to f64")
    }
}

impl Real for f32 {
    const BITS: u32 = 32;

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix stored in a slice: `(offset, row stride, col stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout { offset: 0, rs: cols, cs: 1 }
    }

    pub fn at(self, offset: usize) -> Self {
        Layout { offset, ..self }
    }

    /// View the same storage as its transpose.
    pub fn t(self) -> Self {
        Layout {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked wrapper over [`Real::gemm_raw`]: `C = alpha*A*B + beta*C`
/// where A is `m x k`, B is `k x n`, C is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(la.max_index(m, k) < a.len(), "gemm: A view out of bounds");
        assert!(lb.max_index(k, n) < b.len(), "gemm: B view out of bounds");
    }
    assert!(lc.max_index(m, n) < c.len(), "gemm: C view out of bounds");
    // SAFETY: the three views were bounds-checked above; C does not alias A or B
    // because it is borrowed mutably.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        )
    }
}
