use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bias_shift_init, bias_uniform_init, embed_affine_with, measure_first_order, measure_stationarity,
    train_linear_classes, EmbedConfig, LinearConfig, StationarityReport,
};
use crate::error::{ProbeError, Result};
use crate::linalg::norm;
use crate::net::{InitScheme, Mode, Network, ParamVector};
use crate::spectral::PowerConfig;
use crate::tensor::Batch;
use crate::train::{sgd_step, LrSchedule, Regularizer, SgdState};

/// A run counts as trapped when its final loss is at least this fraction of
/// the linear model's loss.
pub const TRAPPED_RATIO: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrapInit {
    Default { seed: u64 },
    He { seed: u64 },
    /// Embedding of a linear classifier fitted to the training data.
    LinearEmbed {
        #[serde(default)]
        embed: Option<EmbedConfig>,
    },
    Zero,
    BiasShift { seed: u64, shift: f64 },
    BiasUniform { seed: u64, half_width: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    /// Full-batch gradient descent.
    Gd,
    Sgd { batch_size: usize },
    SgdMomentum { batch_size: usize, momentum: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapConfig {
    pub init: TrapInit,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    pub epochs: usize,
    #[serde(default)]
    pub linear: LinearConfig,
    /// Extreme-eigenvalue estimation for the before/after reports; `None` skips it.
    #[serde(default)]
    pub spectrum: Option<PowerConfig>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub min_activation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrapResult {
    pub before: StationarityReport,
    pub after: StationarityReport,
    /// Full-dataset loss and gradient norm at the start of every epoch.
    pub trace: Vec<TraceRow>,
    /// Unregularized loss of the fitted linear classifier.
    pub linear_loss: f64,
    pub linear_converged: bool,
    /// Whether every ReLU input stayed positive at every step; `None` without ReLUs.
    pub stayed_positive: Option<bool>,
    pub trapped: bool,
    pub params: ParamVector,
}

fn initial_params(net: &Network, init: &TrapInit, data: &Batch, linear: &super::LinearFit) -> Result<ParamVector> {
    Ok(match init {
        TrapInit::Default { seed } => net.init(InitScheme::Default { seed: *seed }),
        TrapInit::He { seed } => net.init(InitScheme::HeUniform { seed: *seed }),
        TrapInit::Zero => net.init(InitScheme::Zero),
        TrapInit::LinearEmbed { embed } => {
            embed_affine_with(&linear.map, net.spec(), &data.inputs, &embed.unwrap_or_default())?
        }
        TrapInit::BiasShift { seed, shift } => bias_shift_init(&net.init(InitScheme::Default { seed: *seed }), *shift),
        TrapInit::BiasUniform { seed, half_width } => {
            bias_uniform_init(&net.init(InitScheme::Default { seed: *seed }), *half_width, seed.wrapping_add(1))?
        }
    })
}

fn report(net: &Network, params: &[f64], data: &Batch, spectrum: &Option<PowerConfig>) -> Result<StationarityReport> {
    let stats = net.fresh_stats();
    match spectrum {
        Some(p) => measure_stationarity(net, params, &stats, data, p),
        None => measure_first_order(net, params, &stats, data),
    }
}

/// Trains `net` from the configured initialization and reports how far it
/// gets relative to the best linear classifier.
pub fn trapping_experiment(net: &Network, data: &Batch, cfg: &TrapConfig) -> Result<TrapResult> {
    if net.has_batch_norm() {
        return Err(ProbeError::Argument("trapping runs expect a network without batch norm".into()));
    }
    let schedule = cfg.schedule.resolve()?;
    let linear = train_linear_classes(data, net.classes(), &cfg.linear)?;
    let mut params = initial_params(net, &cfg.init, data, &linear)?;
    let stats = net.fresh_stats();
    let before = report(net, &params.values, data, &cfg.spectrum)?;

    let (batch_size, momentum) = match cfg.optimizer {
        Optimizer::Gd => (data.len(), 0.0),
        Optimizer::Sgd { batch_size } => (batch_size, 0.0),
        Optimizer::SgdMomentum { batch_size, momentum } => (batch_size, momentum),
    };
    if batch_size == 0 {
        return Err(ProbeError::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::default();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut lowest: Option<f64> = None;
    let track = |lowest: &mut Option<f64>, v: Option<f64>| {
        if let Some(v) = v {
            *lowest = Some(lowest.map_or(v, |l| l.min(v)));
        }
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch)?;
        let full = net.loss_grad(&params.values, &stats, data, Mode::Train)?;
        track(&mut lowest, full.min_pre_activation);
        trace.push(TraceRow {
            epoch,
            lr,
            loss: full.loss,
            grad_norm: norm(&full.grad),
            min_activation: full.min_pre_activation,
        });
        if batch_size >= data.len() {
            sgd_step(&mut params.values, &full.grad, &mut state, lr, momentum, &Regularizer::None)?;
            continue;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let mb = data.select(chunk);
            let lg = net.loss_grad(&params.values, &stats, &mb, Mode::Train)?;
            track(&mut lowest, lg.min_pre_activation);
            sgd_step(&mut params.values, &lg.grad, &mut state, lr, momentum, &Regularizer::None)?;
        }
    }
    let after = report(net, &params.values, data, &cfg.spectrum)?;
    track(&mut lowest, after.min_activation);
    Ok(TrapResult {
        trapped: after.loss >= TRAPPED_RATIO * linear.data_loss,
        before,
        after,
        trace,
        linear_loss: linear.data_loss,
        linear_converged: linear.converged,
        stayed_positive: lowest.map(|l| l > 0.0),
        params,
    })
}
