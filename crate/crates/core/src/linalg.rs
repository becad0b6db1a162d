//! Thin checked wrapper around the strided `dgemm` kernel.

/// Strided view of a dense matrix stored in a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Row-major matrix with `cols` columns.
    pub(crate) const fn rm(cols: usize) -> Self {
        Self { row: cols as isize, col: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub(crate) const fn tr(cols: usize) -> Self {
        Self { row: 1, col: cols as isize }
    }

    /// Row-major matrix whose rows are `row` apart.
    pub(crate) const fn rows(row: usize) -> Self {
        Self { row: row as isize, col: 1 }
    }

    fn extent(&self, m: usize, n: usize) -> usize {
        if m == 0 || n == 0 {
            return 0;
        }
        ((m - 1) as isize * self.row + (n - 1) as isize * self.col) as usize + 1
    }
}

/// `c <- alpha * a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    assert!(sa.extent(m, k) <= a.len(), "gemm: a too short");
    assert!(sb.extent(k, n) <= b.len(), "gemm: b too short");
    assert!(sc.extent(m, n) <= c.len(), "gemm: c too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the extents checked above bound every index the kernel touches,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            sc.row,
            sc.col,
        );
    }
}
