//! Optimizers, learning-rate schedules, regularizers, PGD attacks and the
//! (adversarial) training loop.

mod pgd;
mod regularizer;
mod schedule;

pub use pgd::{pgd_attack, robust_accuracy, AttackConfig};
pub use regularizer::{mu_heuristic, norm_bias_value_grad, Regularizer};
pub use schedule::LrSchedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment;
use crate::error::{ProbeError, Result};
use crate::net::{Mode, Network, ParamVector, RunningStats};
use crate::tensor::Batch;

/// Parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ParamVector,
    pub stats: RunningStats,
}

impl Model {
    pub fn new(net: &Network, params: ParamVector) -> Self {
        Self { params, stats: net.fresh_stats() }
    }
}

/// Momentum buffer of heavy-ball SGD.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

/// `v ← momentum·v + (g + ∇R(φ))`, `φ ← φ − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    reg: &Regularizer,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(ProbeError::Argument(format!("learning rate must be positive, got {lr}")));
    }
    let total = reg.add_to(params, grad);
    if state.velocity.len() != params.len() {
        state.velocity = vec![0.0; params.len()];
    }
    for ((p, v), g) in params.iter_mut().zip(state.velocity.iter_mut()).zip(&total) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(ProbeError::Numeric(format!("non-finite parameter {i} after SGD step (lr {lr})")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub regularizer: Regularizer,
    /// Random-crop padding; `None` disables augmentation.
    #[serde(default)]
    pub augment_padding: Option<usize>,
    /// PGD perturbation applied to every minibatch (adversarial training).
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if let Err(e) = self.regularizer.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.schedule.resolve() {
            errs.push(e.to_string());
        }
        if let Some(a) = &self.attack {
            if let Err(e) = a.validate() {
                errs.push(e.to_string());
            }
        }
        errs
    }
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    pub param_norm: f64,
}

fn stream(seed: u64, epoch: usize, salt: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        ^ salt;
    ChaCha8Rng::seed_from_u64(mixed)
}

/// One pass over `data` in minibatches: augment, optionally perturb with PGD,
/// then take an SGD step on the train-mode loss. Returns the mean minibatch loss.
pub fn adversarial_train_epoch(
    net: &Network,
    model: &mut Model,
    state: &mut SgdState,
    data: &Batch,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let mut order_rng = stream(cfg.seed, epoch, 0);
    let mut attack_rng = stream(cfg.seed, epoch, 0xA77A_C4ED);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.batch_size < n {
        order.shuffle(&mut order_rng);
    }
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let mut mb = if chunk.len() == n && cfg.batch_size >= n {
            data.clone()
        } else {
            data.select(chunk)
        };
        if let Some(pad) = cfg.augment_padding {
            mb = augment(&mb, pad, &mut order_rng);
        }
        if let Some(attack) = &cfg.attack {
            mb.inputs = pgd_attack(
                net,
                &model.params.values,
                &model.stats,
                &mb,
                attack,
                Mode::Eval,
                &mut attack_rng,
            )?;
        }
        let lg = net.loss_grad(&model.params.values, &model.stats, &mb, Mode::Train)?;
        model.stats.update(&lg.batch_stats, net.bn_momentums());
        sgd_step(&mut model.params.values, &lg.grad, state, lr, cfg.momentum, &cfg.regularizer)?;
        total += lg.loss;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Evaluation settings for [`train`].
#[derive(Clone, Debug, Default)]
pub struct EvalSpec<'a> {
    pub test: Option<&'a Batch>,
    pub attack: Option<AttackConfig>,
    /// Examples attacked per chunk when measuring robust accuracy.
    pub attack_limit: Option<usize>,
}

/// Runs `cfg.epochs` epochs, calling `hook` after each one.
pub fn train<F>(
    net: &Network,
    model: &mut Model,
    data: &Batch,
    cfg: &TrainConfig,
    eval: &EvalSpec<'_>,
    mut hook: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(usize, &Model) -> Result<()>,
{
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(ProbeError::Config(errs.join("; ")));
    }
    let schedule = cfg.schedule.resolve()?;
    let mut state = SgdState::default();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch)?;
        let train_loss = adversarial_train_epoch(net, model, &mut state, data, cfg, epoch, lr)?;
        let eval_set = eval.test.unwrap_or(data);
        let clean_acc = net.accuracy(&model.params.values, &model.stats, eval_set)?;
        let robust_acc = match &eval.attack {
            Some(a) => {
                let limit = eval.attack_limit.unwrap_or(eval_set.len()).min(eval_set.len());
                let subset = eval_set.select(&(0..limit).collect::<Vec<_>>());
                let mut rng = stream(cfg.seed, epoch, 0xE7A1);
                Some(robust_accuracy(net, &model.params.values, &model.stats, &subset, a, 256, &mut rng)?)
            }
            None => None,
        };
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            clean_acc,
            robust_acc,
            param_norm: model.params.norm(),
        });
        hook(epoch, model)?;
    }
    Ok(records)
}

/// Training trace as CSV: `epoch,lr,train_loss,clean_acc,robust_acc,param_norm`.
pub fn trace_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,clean_acc,robust_acc,param_norm\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.train_loss,
            r.clean_acc,
            r.robust_acc.map(|v| v.to_string()).unwrap_or_default(),
            r.param_norm
        ));
    }
    out
}
