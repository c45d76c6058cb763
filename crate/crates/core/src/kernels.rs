//! Dense kernels shared by the tape's forward and backward passes.

/// Strided view of an `m × n` matrix inside a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn row_major(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The same storage read as its transpose.
    pub fn t(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a · b + beta * c` for an `m × k` by `k × n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    beta: f64,
    c: &mut [f64],
    cv: MatView,
) {
    assert!(a.len() >= extent(m, k, av), "gemm: lhs slice too short");
    assert!(b.len() >= extent(k, n, bv), "gemm: rhs slice too short");
    assert!(c.len() >= extent(m, n, cv), "gemm: output slice too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the provided slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}

fn extent(rows: usize, cols: usize, v: MatView) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    debug_assert!(v.rs >= 0 && v.cs >= 0);
    (rows - 1) * v.rs as usize + (cols - 1) * v.cs as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views_match_naive_product() {
        // a is stored as 3x2 and read transposed as 2x3.
        let a = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(
            2,
            3,
            2,
            1.0,
            &a,
            MatView::row_major(2).t(),
            &b,
            MatView::row_major(2),
            0.0,
            &mut c,
            MatView::row_major(2),
        );
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }
}
