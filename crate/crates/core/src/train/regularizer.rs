use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::linalg::dot;

/// Explicit parameter-norm regularizers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    /// `λ‖φ‖²`, gradient `2λφ`.
    WeightDecay { lambda: f64 },
    /// `coefficient · |‖φ‖² − μ²|`.
    NormBias { coefficient: f64, mu_sq: f64 },
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Regularizer::None => true,
            Regularizer::WeightDecay { lambda } => lambda >= 0.0,
            Regularizer::NormBias { coefficient, mu_sq } => coefficient >= 0.0 && mu_sq >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ProbeError::Config(format!("negative regularizer coefficient in {self:?}")))
        }
    }

    pub fn value(&self, phi: &[f64]) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::WeightDecay { lambda } => lambda * dot(phi, phi),
            Regularizer::NormBias { coefficient, mu_sq } => coefficient * norm_bias_value_grad(phi, mu_sq).0,
        }
    }

    /// Multiplier `c` such that the regularizer gradient is `c·φ`.
    fn gradient_factor(&self, phi: &[f64]) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::WeightDecay { lambda } => 2.0 * lambda,
            Regularizer::NormBias { coefficient, mu_sq } => 2.0 * coefficient * kink_sign(phi, mu_sq),
        }
    }

    /// `grad[i] + reg_grad[i]` for every coordinate.
    pub fn add_to(&self, phi: &[f64], grad: &[f64]) -> Vec<f64> {
        let c = self.gradient_factor(phi);
        if c == 0.0 {
            return grad.to_vec();
        }
        grad.iter().zip(phi).map(|(g, p)| g + c * p).collect()
    }
}

fn kink_sign(phi: &[f64], mu_sq: f64) -> f64 {
    let d = dot(phi, phi) - mu_sq;
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(|‖φ‖² − μ²|, 2·sign(‖φ‖² − μ²)·φ)` with `sign(0) = 0`.
pub fn norm_bias_value_grad(phi: &[f64], mu_sq: f64) -> (f64, Vec<f64>) {
    let value = (dot(phi, phi) - mu_sq).abs();
    let c = 2.0 * kink_sign(phi, mu_sq);
    (value, phi.iter().map(|p| c * p).collect())
}

/// `μ² = slack·‖φ_wd‖²` from a model trained with weight decay.
pub fn mu_heuristic(trained_with_wd: &[f64], slack: f64) -> Result<f64> {
    if !(slack >= 1.0) {
        return Err(ProbeError::Argument(format!("slack factor must be >= 1, got {slack}")));
    }
    Ok(slack * dot(trained_with_wd, trained_with_wd))
}
