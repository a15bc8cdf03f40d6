use faer::{Col, Mat};

use crate::error::{ProbeError, Result};

/// Relative tolerance below which singular values count as zero.
pub const RANK_TOL: f64 = 1e-10;

/// `x ↦ Ax + b` with a cached thin SVD `A = U Σ V`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub a: Mat<f64>,
    pub b: Col<f64>,
    /// `n x s`
    pub u: Mat<f64>,
    /// Descending, length `s`.
    pub sigma: Vec<f64>,
    /// `s x m`
    pub v: Mat<f64>,
    /// Numerical rank of `A` (0 for the zero map).
    pub rank: usize,
}

/// Thin SVD with singular values descending and `V` returned as `s x m`.
pub(crate) fn sorted_svd(a: &Mat<f64>) -> Result<(Mat<f64>, Vec<f64>, Mat<f64>)> {
    let svd = a
        .thin_svd()
        .map_err(|e| ProbeError::Numeric(format!("SVD of a {}x{} matrix failed: {e:?}", a.nrows(), a.ncols())))?;
    let s = svd.S().column_vector();
    let sig: Vec<f64> = (0..s.nrows()).map(|i| s[i]).collect();
    Ok((svd.U().to_owned(), sig, svd.V().transpose().to_owned()))
}

/// Best rank-`s` approximation of `a` in Frobenius norm.
pub fn truncate_rank(a: &Mat<f64>, s: usize) -> Result<Mat<f64>> {
    let (u, sig, vt) = sorted_svd(a)?;
    let k = s.min(sig.len());
    Ok(Mat::from_fn(a.nrows(), a.ncols(), |i, j| (0..k).map(|r| u[(i, r)] * sig[r] * vt[(r, j)]).sum()))
}

/// Row-major `rows x cols` slice as a matrix.
pub fn mat_from_row_major(rows: usize, cols: usize, data: &[f64]) -> Mat<f64> {
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

/// Matrix entries in row-major order.
pub fn mat_to_row_major(m: &Mat<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

impl AffineMap {
    pub fn new(a: Mat<f64>, b: Col<f64>) -> Result<Self> {
        if a.nrows() != b.nrows() {
            return Err(ProbeError::Argument(format!(
                "A is {}x{} but b has length {}",
                a.nrows(),
                a.ncols(),
                b.nrows()
            )));
        }
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(ProbeError::Argument("affine map needs n, m >= 1".into()));
        }
        let (u_full, sig, vt_full) = sorted_svd(&a)?;
        let top = sig.first().copied().unwrap_or(0.0);
        let rank = sig.iter().filter(|&&s| top > 0.0 && s > RANK_TOL * top).count();
        let (n, m) = (a.nrows(), a.ncols());
        let (u, sigma, v) = if rank == 0 {
            // Pure-bias map: one zero column carries nothing through the hidden layers.
            (Mat::zeros(n, 1), vec![0.0], Mat::zeros(1, m))
        } else {
            (
                u_full.as_ref().subcols(0, rank).to_owned(),
                sig[..rank].to_vec(),
                vt_full.as_ref().subrows(0, rank).to_owned(),
            )
        };
        Ok(Self { a, b, u, sigma, v, rank })
    }

    /// From row-major `A` (n x m) followed by `b`.
    pub fn from_params(n: usize, m: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * m + n {
            return Err(ProbeError::Argument(format!(
                "expected {} values for a {n}x{m} map, got {}",
                n * m + n,
                values.len()
            )));
        }
        Self::new(mat_from_row_major(n, m, &values[..n * m]), Col::from_fn(n, |i| values[n * m + i]))
    }

    /// Row-major `A` followed by `b`, the layout of a single dense layer.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = mat_to_row_major(&self.a);
        out.extend((0..self.b.nrows()).map(|i| self.b[i]));
        out
    }

    /// Width `s` the embedding needs: `max(1, rank)`.
    pub fn width(&self) -> usize {
        self.sigma.len()
    }

    pub fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.a.nrows())
            .map(|i| (0..self.a.ncols()).map(|j| self.a[(i, j)] * x[j]).sum::<f64>() + self.b[i])
            .collect()
    }

    /// `‖UΣV − A‖_F`.
    pub fn reconstruction_error(&self) -> f64 {
        let (n, m) = (self.a.nrows(), self.a.ncols());
        let s = self.width();
        let rec = Mat::from_fn(n, m, |i, j| (0..s).map(|r| self.u[(i, r)] * self.sigma[r] * self.v[(r, j)]).sum::<f64>());
        (rec - &self.a).norm_l2()
    }
}
