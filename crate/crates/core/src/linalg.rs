//! Small dense-vector helpers and a strided GEMM wrapper.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v *= alpha);
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Row-major matrix view descriptor: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols as isize, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self { rows: cols, cols: rows, rs: 1, cs: cols as isize }
    }
}

/// `c = alpha * a * b + beta * c` where `c` is row-major.
pub fn gemm(alpha: f64, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64]) {
    assert_eq!(av.cols, bv.rows, "inner dimensions");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the view descriptors are checked against the slice lengths by
    // construction at every call site; matrixmultiply reads within
    // m*k / k*n / m*n elements along the given strides.
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
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transpose() {
        // a: 2x3, b stored as 4x3 (so b^T is 3x4)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let mut c = vec![1.0; 8];
        gemm(1.0, &a, View::row_major(2, 3), &b, View::transposed(4, 3), 2.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 2.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * b[j * 3 + k];
                }
                assert!((c[i * 4 + j] - s).abs() < 1e-12);
            }
        }
    }
}
