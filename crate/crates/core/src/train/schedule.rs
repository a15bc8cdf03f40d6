use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

/// Piecewise-constant learning-rate schedules indexed by epoch (0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `base · factor^k` where `k` counts milestones `<= epoch`.
    Piecewise { base: f64, milestones: Vec<usize>, factor: f64 },
    /// One of the built-in tables, see [`LrSchedule::named`].
    Named { name: String },
}

impl LrSchedule {
    /// Built-in tables:
    /// * `regularizer`: 0.1, ÷10 at epochs 100, 175, 225, 275
    /// * `finetune`: 0.001, ÷10 after the third and fifth epochs
    /// * `natural`: 0.01, ÷10 at epochs 100, 150, 175, 190
    /// * `adversarial-c100`: 0.1, ÷10 at epochs 200, 250
    /// * `adversarial-skipless-c100`: 0.1, ÷10 at epochs 200, 250, 300
    pub fn named(name: &str) -> Result<LrSchedule> {
        let (base, milestones): (f64, &[usize]) = match name {
            "regularizer" => (0.1, &[100, 175, 225, 275]),
            "finetune" => (0.001, &[3, 5]),
            "natural" => (0.01, &[100, 150, 175, 190]),
            "adversarial-c100" => (0.1, &[200, 250]),
            "adversarial-skipless-c100" => (0.1, &[200, 250, 300]),
            other => return Err(ProbeError::Config(format!("unknown learning-rate schedule `{other}`"))),
        };
        Ok(LrSchedule::Piecewise { base, milestones: milestones.to_vec(), factor: 0.1 })
    }

    pub fn resolve(&self) -> Result<LrSchedule> {
        match self {
            LrSchedule::Named { name } => LrSchedule::named(name),
            other => Ok(other.clone()),
        }
    }

    /// Same milestones with every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<LrSchedule> {
        Ok(match self.resolve()? {
            LrSchedule::Constant { lr } => LrSchedule::Constant { lr: lr * factor },
            LrSchedule::Piecewise { base, milestones, factor: f } => {
                LrSchedule::Piecewise { base: base * factor, milestones, factor: f }
            }
            LrSchedule::Named { .. } => unreachable!("resolved above"),
        })
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        match self {
            LrSchedule::Constant { lr } => Ok(*lr),
            LrSchedule::Piecewise { base, milestones, factor } => {
                let k = milestones.iter().filter(|&&m| m <= epoch).count();
                Ok(base * factor.powi(k as i32))
            }
            LrSchedule::Named { name } => LrSchedule::named(name)?.lr(epoch),
        }
    }
}
