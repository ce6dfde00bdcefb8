//! Dense matrix product used by every contraction on the tape.

/// Strides of a logical `rows x cols` matrix inside a flat slice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl Layout {
    /// Row-major `rows x cols`.
    pub(crate) fn rows(rows: usize, cols: usize) -> Self {
        Layout {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Transpose of a row-major `stored_rows x stored_cols` matrix.
    pub(crate) fn trans(stored_rows: usize, stored_cols: usize) -> Self {
        Layout {
            rows: stored_cols,
            cols: stored_rows,
            rs: 1,
            cs: stored_cols,
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = a . b + beta * c` for an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    lc: Layout,
    beta: f64,
) {
    debug_assert!(la.rows == m && la.cols == k);
    debug_assert!(lb.rows == k && lb.cols == n);
    debug_assert!(lc.rows == m && lc.cols == n);
    assert!(a.len() >= la.extent() && b.len() >= lb.extent() && c.len() >= lc.extent());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * lc.rs + j * lc.cs] *= beta;
            }
        }
        return;
    }
    // SAFETY: the extents asserted above keep every strided access in bounds.
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

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    #[test]
    fn matches_naive_product_with_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expected = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &a,
            Layout::rows(m, k),
            &b,
            Layout::rows(k, n),
            &mut c,
            Layout::rows(m, n),
            0.0,
        );
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }

        // Same product with b stored transposed.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(
            m,
            k,
            n,
            &a,
            Layout::rows(m, k),
            &bt,
            Layout::trans(n, k),
            &mut c2,
            Layout::rows(m, n),
            1.0,
        );
        for (x, y) in c2.iter().zip(&expected) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }
}
