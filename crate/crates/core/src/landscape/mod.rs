//! Affine-map embeddings into ReLU MLPs, pathological initializations and
//! trapping experiments.

mod affine;
mod embed;
mod linear;
mod trap;

pub use affine::{mat_from_row_major, mat_to_row_major, truncate_rank, AffineMap, RANK_TOL};
pub use embed::{bias_shift_init, bias_uniform_init, embed_affine, embed_affine_with, EmbedConfig};
pub use linear::{linear_network, train_linear, train_linear_classes, LinearConfig, LinearFit};
pub use trap::{trapping_experiment, Optimizer, TrapConfig, TrapInit, TrapResult, TraceRow, TRAPPED_RATIO};

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::linalg::norm;
use crate::net::{Mode, Network, RunningStats};
use crate::spectral::{extreme_eigenvalues, HvpConfig, NetObjective, PowerConfig, SpectrumEstimate};
use crate::tensor::Batch;

/// Loss, gradient norm, extreme Hessian eigenvalues and smallest ReLU input
/// over a full dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub min_ev: Option<SpectrumEstimate>,
    pub max_ev: Option<SpectrumEstimate>,
    pub min_activation: Option<f64>,
}

/// Loss and gradient only; eigenvalues are left empty.
pub fn measure_first_order(net: &Network, params: &[f64], stats: &RunningStats, data: &Batch) -> Result<StationarityReport> {
    if data.is_empty() {
        return Err(ProbeError::Argument("dataset is empty".into()));
    }
    let lg = net.loss_grad(params, stats, data, Mode::Eval)?;
    Ok(StationarityReport {
        loss: lg.loss,
        grad_norm: norm(&lg.grad),
        min_ev: None,
        max_ev: None,
        min_activation: lg.min_pre_activation,
    })
}

pub fn measure_stationarity(
    net: &Network,
    params: &[f64],
    stats: &RunningStats,
    data: &Batch,
    power: &PowerConfig,
) -> Result<StationarityReport> {
    let mut report = measure_first_order(net, params, stats, data)?;
    let obj = NetObjective { net, stats, data };
    let (min, max) = extreme_eigenvalues(&obj, params, &HvpConfig::default(), power)?;
    report.min_ev = Some(min);
    report.max_ev = Some(max);
    Ok(report)
}
