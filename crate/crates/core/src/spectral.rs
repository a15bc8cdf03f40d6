//! Hessian-vector products and extreme-eigenvalue estimates of a training loss.
//!
//! The Hessian is never formed except by [`dense_hessian`], which is a test
//! oracle for tiny parameter counts. Everything else works through
//! [`hvp`], a central difference of full-dataset gradients.

use faer::{Mat, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::linalg::{axpy, dot, norm, scale};
use crate::net::{Mode, Network, RunningStats};
use crate::tensor::Batch;

/// A differentiable scalar objective over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn loss_grad(&self, phi: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Smallest ReLU input over the objective's data, if the model has ReLUs.
    fn min_pre_activation(&self, _phi: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Mean cross-entropy of a network over a fixed dataset (eval mode).
pub struct NetObjective<'a> {
    pub net: &'a Network,
    pub stats: &'a RunningStats,
    pub data: &'a Batch,
}

impl Objective for NetObjective<'_> {
    fn dim(&self) -> usize {
        self.net.param_count()
    }

    fn loss_grad(&self, phi: &[f64]) -> Result<(f64, Vec<f64>)> {
        let lg = self.net.loss_grad(phi, self.stats, self.data, Mode::Eval)?;
        Ok((lg.loss, lg.grad))
    }

    fn min_pre_activation(&self, phi: &[f64]) -> Result<Option<f64>> {
        let fwd = self.net.forward(phi, self.stats, &self.data.inputs, Mode::Eval)?;
        Ok(fwd.min_pre_activation())
    }
}

/// `½ φᵀ M φ` with symmetric `M`.
pub struct Quadratic {
    pub m: Mat<f64>,
}

impl Quadratic {
    pub fn diagonal(d: &[f64]) -> Self {
        Self { m: Mat::from_fn(d.len(), d.len(), |i, j| if i == j { d[i] } else { 0.0 }) }
    }

    /// `M v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.m.nrows()).map(|i| (0..self.m.ncols()).map(|j| self.m[(i, j)] * v[j]).sum()).collect()
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.m.nrows()
    }

    fn loss_grad(&self, phi: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g = self.apply(phi);
        Ok((0.5 * dot(phi, &g), g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HvpConfig {
    /// Difference step is `step_scale * (1 + ‖φ‖)`.
    pub step_scale: f64,
}

impl Default for HvpConfig {
    fn default() -> Self {
        Self { step_scale: 1e-4 }
    }
}

impl HvpConfig {
    pub fn step(&self, phi: &[f64]) -> f64 {
        self.step_scale * (1.0 + norm(phi))
    }
}

/// `H v` by central differences of the gradient along `v / ‖v‖`.
pub fn hvp<O: Objective + ?Sized>(obj: &O, phi: &[f64], v: &[f64], cfg: &HvpConfig) -> Result<Vec<f64>> {
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    if !vn.is_finite() {
        return Err(ProbeError::Argument("hvp direction must be finite".into()));
    }
    let h = cfg.step(phi);
    let mut plus = phi.to_vec();
    let mut minus = phi.to_vec();
    axpy(h / vn, v, &mut plus);
    axpy(-h / vn, v, &mut minus);
    let (_, gp) = obj.loss_grad(&plus)?;
    let (_, gm) = obj.loss_grad(&minus)?;
    let factor = vn / (2.0 * h);
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) * factor).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(ProbeError::Numeric(format!(
            "non-finite Hessian-vector product (h = {h:e}, ‖φ‖ = {:e}, ‖v‖ = {vn:e})",
            norm(phi)
        )));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerConfig {
    pub iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Shift multiplier applied to the dominant magnitude for the minimum search.
    pub shift_factor: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self { iters: 500, tol: 1e-7, seed: 0, shift_factor: 1.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub eigenvalue: f64,
    pub iterations: usize,
    /// `‖Hv − λv‖ / ‖v‖` at the returned vector.
    pub residual: f64,
    pub converged: bool,
    /// Shift `σ` used by the shifted method, if any.
    pub shift: Option<f64>,
}

fn random_unit(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm(&v);
    scale(1.0 / n, &mut v);
    v
}

/// Dominant-magnitude eigenvalue of a symmetric operator by power iteration.
///
/// The sign comes from the Rayleigh quotient, so a dominant negative
/// eigenvalue is reported as negative.
pub fn power_max<F>(mut op: F, dim: usize, cfg: &PowerConfig) -> Result<SpectrumEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 {
        return Err(ProbeError::Argument("power iteration needs dim >= 1".into()));
    }
    let mut v = random_unit(dim, cfg.seed);
    let mut est = SpectrumEstimate {
        eigenvalue: 0.0,
        iterations: 0,
        residual: f64::INFINITY,
        converged: false,
        shift: None,
    };
    for it in 1..=cfg.iters.max(1) {
        let w = op(&v)?;
        let lambda = dot(&v, &w);
        let mut r = w.clone();
        axpy(-lambda, &v, &mut r);
        est.eigenvalue = lambda;
        est.iterations = it;
        est.residual = norm(&r);
        if est.residual <= cfg.tol {
            est.converged = true;
            break;
        }
        let wn = norm(&w);
        if wn == 0.0 {
            // v lies in the null space: eigenvalue 0 with zero residual.
            est.residual = 0.0;
            est.converged = true;
            break;
        }
        v = w;
        scale(1.0 / wn, &mut v);
    }
    Ok(est)
}

/// Minimum eigenvalue via power iteration on `σI − H`, `σ = shift_factor·|λ_dom|`.
pub fn power_min_shifted<F>(mut op: F, dim: usize, cfg: &PowerConfig) -> Result<SpectrumEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let dominant = power_max(&mut op, dim, cfg)?;
    let sigma = cfg.shift_factor * dominant.eigenvalue.abs();
    let shifted = power_max(
        |v: &[f64]| {
            let hv = op(v)?;
            Ok(v.iter().zip(&hv).map(|(a, b)| sigma * a - b).collect())
        },
        dim,
        &PowerConfig { seed: cfg.seed.wrapping_add(1), ..*cfg },
    )?;
    Ok(SpectrumEstimate {
        eigenvalue: sigma - shifted.eigenvalue,
        shift: Some(sigma),
        ..shifted
    })
}

/// Largest and smallest Hessian eigenvalue of `obj` at `phi`.
pub fn extreme_eigenvalues<O: Objective + ?Sized>(
    obj: &O,
    phi: &[f64],
    hvp_cfg: &HvpConfig,
    cfg: &PowerConfig,
) -> Result<(SpectrumEstimate, SpectrumEstimate)> {
    let dim = obj.dim();
    let dominant = power_max(|v: &[f64]| hvp(obj, phi, v, hvp_cfg), dim, cfg)?;
    let min = power_min_shifted(|v: &[f64]| hvp(obj, phi, v, hvp_cfg), dim, cfg)?;
    // The dominant estimate is the maximum unless the spectrum is dominated
    // by a negative eigenvalue; then the maximum is found by shifting the
    // other way.
    let max = if dominant.eigenvalue >= 0.0 {
        dominant
    } else {
        let sigma = cfg.shift_factor * dominant.eigenvalue.abs();
        let shifted = power_max(
            |v: &[f64]| {
                let hv = hvp(obj, phi, v, hvp_cfg)?;
                Ok(v.iter().zip(&hv).map(|(a, b)| sigma * a + b).collect())
            },
            dim,
            &PowerConfig { seed: cfg.seed.wrapping_add(2), ..*cfg },
        )?;
        SpectrumEstimate { eigenvalue: shifted.eigenvalue - sigma, shift: Some(sigma), ..shifted }
    };
    Ok((min, max))
}

/// Explicit Hessian built column by column from [`hvp`].
pub struct DenseHessian {
    /// Columns `hvp(e_j)` before symmetrization.
    pub raw: Mat<f64>,
    /// `(raw + rawᵀ) / 2`.
    pub sym: Mat<f64>,
}

pub const DENSE_HESSIAN_LIMIT: usize = 2000;

pub fn dense_hessian<O: Objective + ?Sized>(obj: &O, phi: &[f64], cfg: &HvpConfig) -> Result<DenseHessian> {
    let p = obj.dim();
    if p > DENSE_HESSIAN_LIMIT {
        return Err(ProbeError::Refused(format!(
            "dense Hessian of {p} parameters exceeds the {DENSE_HESSIAN_LIMIT} limit"
        )));
    }
    let mut raw = Mat::zeros(p, p);
    let mut e = vec![0.0; p];
    for j in 0..p {
        e[j] = 1.0;
        let col = hvp(obj, phi, &e, cfg)?;
        for (i, v) in col.into_iter().enumerate() {
            raw[(i, j)] = v;
        }
        e[j] = 0.0;
    }
    let sym = Mat::from_fn(p, p, |i, j| 0.5 * (raw[(i, j)] + raw[(j, i)]));
    Ok(DenseHessian { raw, sym })
}

impl DenseHessian {
    /// Eigenvalues of the symmetrized matrix, ascending.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let mut ev = self
            .sym
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| ProbeError::Numeric(format!("Hessian eigendecomposition failed: {e:?}")))?;
        ev.sort_by(|a, b| a.total_cmp(b));
        Ok(ev)
    }

    /// Ascending eigenvalues with eigenvectors as matching columns.
    pub fn eigen(&self) -> Result<(Vec<f64>, Mat<f64>)> {
        let evd = self
            .sym
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| ProbeError::Numeric(format!("Hessian eigendecomposition failed: {e:?}")))?;
        let s = evd.S().column_vector();
        Ok(((0..s.nrows()).map(|i| s[i]).collect(), evd.U().to_owned()))
    }

    /// `‖H − Hᵀ‖_F / ‖H‖_F` of the unsymmetrized matrix.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.raw.norm_l2();
        if n == 0.0 {
            0.0
        } else {
            (&self.raw - self.raw.transpose()).norm_l2() / n
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.raw.nrows()).map(|i| self.raw[(i, i)]).sum()
    }
}
