use serde::{Deserialize, Serialize};

use super::affine::{mat_from_row_major, truncate_rank};
use super::AffineMap;
use crate::error::{ProbeError, Result};
use crate::linalg::{dot, norm};
use crate::net::{LayerSpec, Mode, Network, NetworkSpec, RunningStats};
use crate::tensor::{Batch, Shape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    #[serde(default)]
    pub weight_decay: f64,
    /// Maximum rank of `A`; `None` leaves it unconstrained.
    #[serde(default)]
    pub rank_cap: Option<usize>,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    /// Stop once the (projected) gradient norm falls below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_step")]
    pub initial_step: f64,
}

fn default_iters() -> usize {
    20_000
}

fn default_tol() -> f64 {
    1e-6
}

fn default_step() -> f64 {
    1.0
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.0,
            rank_cap: None,
            max_iters: default_iters(),
            tol: default_tol(),
            initial_step: default_step(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearFit {
    pub map: AffineMap,
    /// Regularized objective at the returned point.
    pub loss: f64,
    /// Mean cross-entropy without the penalty.
    pub data_loss: f64,
    /// Norm of the gradient, or of the projected-gradient step when rank-capped.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Single dense layer; parameters are `A` (row-major, n x m) then `b`.
pub fn linear_network(input: usize, classes: usize) -> Result<Network> {
    Network::new(NetworkSpec {
        input: Shape::flat(input),
        layers: vec![LayerSpec::dense(input, classes)],
        classes,
    })
}

struct Problem<'a> {
    net: Network,
    stats: RunningStats,
    data: &'a Batch,
    lambda: f64,
}

impl Problem<'_> {
    fn eval(&self, x: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
        let lg = self.net.loss_grad(x, &self.stats, self.data, Mode::Eval)?;
        let mut g = lg.grad;
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += 2.0 * self.lambda * xi;
        }
        Ok((lg.loss + self.lambda * dot(x, x), lg.loss, g))
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.net.loss(x, &self.stats, self.data, Mode::Eval)? + self.lambda * dot(x, x))
    }
}

/// Minimizes mean cross-entropy plus `λ(‖A‖² + ‖b‖²)` by full-batch
/// gradient descent with backtracking, projecting `A` to rank `s` after every
/// step when a rank cap is set.
pub fn train_linear(data: &Batch, cfg: &LinearConfig) -> Result<LinearFit> {
    let classes = data.labels.iter().copied().max().map_or(2, |k| (k + 1).max(2));
    train_linear_classes(data, classes, cfg)
}

/// [`train_linear`] with an explicit class count.
pub fn train_linear_classes(data: &Batch, classes: usize, cfg: &LinearConfig) -> Result<LinearFit> {
    if !(cfg.weight_decay >= 0.0) {
        return Err(ProbeError::Argument(format!("weight decay must be >= 0, got {}", cfg.weight_decay)));
    }
    if data.is_empty() {
        return Err(ProbeError::Argument("dataset is empty".into()));
    }
    let m = data.inputs.shape.size();
    let n = classes;
    let flat = Batch {
        inputs: data.inputs.clone().reshaped(Shape::flat(m))?,
        labels: data.labels.clone(),
    };
    let net = linear_network(m, n)?;
    let prob = Problem { stats: net.fresh_stats(), net, data: &flat, lambda: cfg.weight_decay };
    let project = cfg.rank_cap.filter(|&s| s < n.min(m));
    let proj = |x: &mut Vec<f64>| -> Result<()> {
        if let Some(s) = project {
            let t = truncate_rank(&mat_from_row_major(n, m, &x[..n * m]), s)?;
            for i in 0..n {
                for j in 0..m {
                    x[i * m + j] = t[(i, j)];
                }
            }
        }
        Ok(())
    };

    let mut x = vec![0.0; n * m + n];
    let mut step = cfg.initial_step;
    let (mut f, mut data_loss, mut g) = prob.eval(&x)?;
    let mut grad_norm = norm(&g);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let (next, d) = loop {
            let mut cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            proj(&mut cand)?;
            let d: Vec<f64> = cand.iter().zip(&x).map(|(a, b)| a - b).collect();
            let bound = f + dot(&g, &d) + dot(&d, &d) / (2.0 * step);
            if prob.value(&cand)? <= bound + 1e-15 * f.abs() || step < 1e-16 {
                break (cand, d);
            }
            step *= 0.5;
        };
        grad_norm = if project.is_some() { norm(&d) / step } else { norm(&g) };
        if grad_norm <= cfg.tol {
            converged = true;
            break;
        }
        x = next;
        (f, data_loss, g) = prob.eval(&x)?;
        iterations += 1;
        step *= 2.0;
        if project.is_none() {
            grad_norm = norm(&g);
            if grad_norm <= cfg.tol {
                converged = true;
                break;
            }
        }
    }
    Ok(LinearFit { map: AffineMap::from_params(n, m, &x)?, loss: f, data_loss, grad_norm, iterations, converged })
}
