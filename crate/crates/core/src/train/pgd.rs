use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::net::{Mode, Network, RunningStats};
use crate::tensor::{Batch, Tensor};

/// ℓ∞ projected-gradient attack settings (pixel scale, inputs in `[0, 1]`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl AttackConfig {
    /// 7 steps of 2/255 inside an 8/255 ball, random start.
    pub fn training() -> Self {
        Self { epsilon: 8.0 / 255.0, step_size: 2.0 / 255.0, steps: 7, random_start: true }
    }

    /// 20 steps of 2/255 inside an 8/255 ball.
    pub fn eval_large() -> Self {
        Self { epsilon: 8.0 / 255.0, step_size: 2.0 / 255.0, steps: 20, random_start: false }
    }

    /// 20 steps of 0.25/255 inside a 1/255 ball.
    pub fn eval_small() -> Self {
        Self { epsilon: 1.0 / 255.0, step_size: 0.25 / 255.0, steps: 20, random_start: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) {
            return Err(ProbeError::Config(format!(
                "attack epsilon and step size must be >= 0, got {} and {}",
                self.epsilon, self.step_size
            )));
        }
        Ok(())
    }
}

fn project(x: &mut [f64], x0: &[f64], eps: f64) {
    for (v, &o) in x.iter_mut().zip(x0) {
        *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

/// Iterates `x ← Π(x + step·sign(∇ₓL))` over the ε-ball intersected with `[0, 1]`.
pub fn pgd_attack(
    net: &Network,
    params: &[f64],
    stats: &RunningStats,
    batch: &Batch,
    cfg: &AttackConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let x0 = &batch.inputs;
    if cfg.epsilon == 0.0 {
        return Ok(x0.clone());
    }
    let mut adv = batch.clone();
    if cfg.random_start {
        for v in adv.inputs.data.iter_mut() {
            *v += rng.random_range(-cfg.epsilon..=cfg.epsilon);
        }
        project(&mut adv.inputs.data, &x0.data, cfg.epsilon);
    }
    for _ in 0..cfg.steps {
        let (_, g) = net.input_grad(params, stats, &adv, mode)?;
        for (v, gi) in adv.inputs.data.iter_mut().zip(&g.data) {
            let s = if *gi > 0.0 {
                1.0
            } else if *gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v += cfg.step_size * s;
        }
        project(&mut adv.inputs.data, &x0.data, cfg.epsilon);
    }
    Ok(adv.inputs)
}

/// Accuracy on PGD-perturbed inputs, attacking in chunks of `chunk` examples.
pub fn robust_accuracy(
    net: &Network,
    params: &[f64],
    stats: &RunningStats,
    data: &Batch,
    cfg: &AttackConfig,
    chunk: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let b = data.select(part);
        let adv = pgd_attack(net, params, stats, &b, cfg, Mode::Eval, rng)?;
        let logits = net.predict(params, stats, &adv, Mode::Eval)?;
        hits += (0..b.len())
            .filter(|&i| crate::net::argmax(logits.example(i)) == b.labels[i])
            .count();
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}
