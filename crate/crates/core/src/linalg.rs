//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Strided view of a matrix stored in a slice: `(row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` matrix.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn extent(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c = a·b + beta·c` where `a` is `m×k`, `b` is `k×n` and `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    assert!(a.len() >= la.extent(m, k), "gemm: lhs too short");
    assert!(b.len() >= lb.extent(k, n), "gemm: rhs too short");
    assert!(c.len() >= lc.extent(m, n), "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the extents checked above cover every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product_with_transpose() {
        // a = [[1,2],[3,4]], b stored as [[5,7],[6,8]] and read transposed.
        let a = [1.0, 2.0, 3.0, 4.0];
        let bt = [5.0, 7.0, 6.0, 8.0];
        let mut c = [0.0; 4];
        gemm(
            2,
            2,
            2,
            &a,
            Layout::row_major(2),
            &bt,
            Layout::transposed(2),
            0.0,
            &mut c,
            Layout::row_major(2),
        );
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
