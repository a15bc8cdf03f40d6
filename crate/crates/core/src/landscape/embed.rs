use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AffineMap;
use crate::error::{ProbeError, Result};
use crate::net::{Network, NetworkSpec, ParamVector, Role};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    /// Multiplier on the bias constant `c`; 1 keeps the minimal constant.
    pub safety: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { safety: 1.0 }
    }
}

/// Embedding with the minimal bias constant. See [`embed_affine_with`].
pub fn embed_affine(map: &AffineMap, spec: &NetworkSpec, omega: &Tensor) -> Result<ParamVector> {
    embed_affine_with(map, spec, omega, &EmbedConfig::default())
}

/// MLP parameters whose network equals `x ↦ Ax + b` on every row of `omega`,
/// with every pre-activation at least 1.
pub fn embed_affine_with(map: &AffineMap, spec: &NetworkSpec, omega: &Tensor, cfg: &EmbedConfig) -> Result<ParamVector> {
    let widths = spec
        .mlp_widths()
        .filter(|w| !w.is_empty())
        .ok_or_else(|| ProbeError::Argument("embedding needs a ReLU MLP with at least one hidden layer".into()))?;
    let (n, m, s) = (map.output_dim(), map.input_dim(), map.width());
    if spec.input.size() != m || spec.classes != n {
        return Err(ProbeError::Argument(format!(
            "network maps {} -> {} but the affine map is {m} -> {n}",
            spec.input.size(),
            spec.classes
        )));
    }
    if omega.count == 0 {
        return Err(ProbeError::Argument("input set is empty".into()));
    }
    if omega.shape.size() != m {
        return Err(ProbeError::Argument(format!("input set has dimension {}, expected {m}", omega.shape.size())));
    }
    let min_width = *widths.iter().min().expect("nonempty");
    if min_width < s {
        return Err(ProbeError::Capacity(format!("minimum hidden width {min_width} is below the map's rank {s}")));
    }
    if !(cfg.safety >= 1.0) {
        return Err(ProbeError::Argument(format!("safety multiplier must be >= 1, got {}", cfg.safety)));
    }

    // ΣV, s x m.
    let sv: Vec<f64> = (0..s).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| map.sigma[i] * map.v[(i, j)]).collect();
    let mut peak: f64 = 0.0;
    for r in 0..omega.count {
        let x = omega.example(r);
        for i in 0..s {
            let z: f64 = (0..m).map(|j| sv[i * m + j] * x[j]).sum();
            peak = peak.max(z.abs());
        }
    }
    let c = cfg.safety * (peak + 1.0);

    let net = Network::new(spec.clone())?;
    let mut params = ParamVector::zeros(net.segments().to_vec());
    let weights: Vec<_> = params.segments_with(Role::Weight).cloned().collect();
    let biases: Vec<_> = params.segments_with(Role::Bias).cloned().collect();
    let depth = weights.len();
    for (k, (wseg, bseg)) in weights.iter().zip(&biases).enumerate() {
        let fan_in = wseg.fan_in;
        let w = params.segment_mut(wseg);
        if k == 0 {
            for i in 0..s {
                w[i * fan_in..(i + 1) * fan_in].copy_from_slice(&sv[i * m..(i + 1) * m]);
            }
        } else if k + 1 < depth {
            for i in 0..s {
                w[i * fan_in + i] = 1.0;
            }
        } else {
            for i in 0..n {
                for j in 0..s {
                    w[i * fan_in + j] = map.u[(i, j)];
                }
            }
        }
        let b = params.segment_mut(bseg);
        if k == 0 {
            b.fill(c);
        } else if k + 1 < depth {
            b[s..].fill(c);
        } else {
            for i in 0..n {
                let row_sum: f64 = (0..s).map(|j| map.u[(i, j)]).sum();
                b[i] = map.b[i] - c * row_sum;
            }
        }
    }
    Ok(params)
}

/// Adds `shift` to every bias coordinate; weights and batch-norm parameters are untouched.
pub fn bias_shift_init(params: &ParamVector, shift: f64) -> ParamVector {
    let mut out = params.clone();
    let segs: Vec<_> = out.segments_with(Role::Bias).cloned().collect();
    for seg in &segs {
        out.segment_mut(seg).iter_mut().for_each(|v| *v += shift);
    }
    out
}

/// Replaces every bias with an i.i.d. draw from `U(−a, a)`.
pub fn bias_uniform_init(params: &ParamVector, half_width: f64, seed: u64) -> Result<ParamVector> {
    if !(half_width >= 0.0) {
        return Err(ProbeError::Argument(format!("half width must be >= 0, got {half_width}")));
    }
    let mut out = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs: Vec<_> = out.segments_with(Role::Bias).cloned().collect();
    for seg in &segs {
        out.segment_mut(seg).iter_mut().for_each(|v| {
            *v = if half_width == 0.0 { 0.0 } else { rng.random_range(-half_width..half_width) }
        });
    }
    Ok(out)
}
