//! Safe strided matrix products over slices.

use crate::real::Real;

/// A strided view of a matrix inside a flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatLayout {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatLayout {
    /// Dense row-major matrix with `cols` columns.
    pub const fn row_major(cols: usize) -> Self {
        MatLayout {
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub const fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    /// Swaps the roles of rows and columns.
    pub const fn t(self) -> Self {
        MatLayout {
            offset: self.offset,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = a * b` (`accumulate == false`) or `c += a * b`, where `a` is `m x k`
/// and `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: MatLayout,
    b: &[T],
    lb: MatLayout,
    c: &mut [T],
    lc: MatLayout,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[lc.offset + i * lc.row_stride + j * lc.col_stride] = T::zero();
                }
            }
        }
        return;
    }
    assert!(la.last_index(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(lb.last_index(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(lc.last_index(m, n) < c.len(), "gemm: output view out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the three assertions above bound every reachable index.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}
