use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating element type of the tensor engine.
///
/// Training runs in `f32`; `f64` exists so gradient checks can use tight
/// tolerances.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a @ b + beta * c` over strided row/column views.
    ///
    /// # Safety
    ///
    /// Every element addressed by the strides must lie inside the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
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

    fn from_f64c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Scalar")
    }

    fn to_f64c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
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
    unsafe fn raw_gemm(
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

/// A strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, S> {
    pub data: &'a [S],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> MatView<'a, S> {
    /// Row-major `rows x cols` block starting at `offset`.
    pub fn row_major(data: &'a [S], offset: usize, rows: usize, cols: usize) -> Self {
        Self { data, offset, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `out[offset..] (row-major m x n) = a @ b + (accumulate ? out : 0)`.
pub(crate) fn gemm<S: Scalar>(
    a: MatView<'_, S>,
    b: MatView<'_, S>,
    out: &mut [S],
    out_offset: usize,
    accumulate: bool,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(out_offset + m * n <= out.len(), "gemm output out of bounds");
    if k == 0 {
        if !accumulate {
            out[out_offset..out_offset + m * n].fill(S::zero());
        }
        return;
    }
    assert!(a.last_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.last_index() < b.data.len(), "gemm rhs out of bounds");
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: the asserts above bound every addressed element of a, b and out.
    unsafe {
        S::raw_gemm(
            m,
            k,
            n,
            S::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr().add(out_offset),
            n as isize,
            1,
        );
    }
}
