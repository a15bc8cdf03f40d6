//! Flat parameter vectors with named segments, and batch-norm running statistics.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::BnScale => "bn-scale",
            Role::BnShift => "bn-shift",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Some(match s {
            "weight" => Role::Weight,
            "bias" => Role::Bias,
            "bn-scale" => Role::BnScale,
            "bn-shift" => Role::BnShift,
            _ => return None,
        })
    }
}

/// A contiguous range of the flat vector owned by one layer role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Depth-first layer index in the network spec.
    pub layer: usize,
    pub role: Role,
    pub start: usize,
    pub len: usize,
    /// Fan-in of the owning layer (used by initializers).
    pub fan_in: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

/// Initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases zero.
    HeUniform { seed: u64 },
    Zero,
    /// Weights and biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Default { seed: u64 },
}

impl ParamVector {
    pub fn zeros(segments: Vec<Segment>) -> Self {
        let len = segments.iter().map(|s| s.len).sum();
        Self {
            values: vec![0.0; len],
            segments,
        }
    }

    pub fn from_values(segments: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = segments.iter().map(|s| s.len).sum();
        if values.len() != expected {
            return Err(ProbeError::Argument(format!(
                "parameter vector of length {} does not match layout of length {expected}",
                values.len()
            )));
        }
        Ok(Self { values, segments })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.values)
    }

    pub fn segment(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.range()]
    }

    pub fn segment_mut(&mut self, seg: &Segment) -> &mut [f64] {
        let r = seg.range();
        &mut self.values[r]
    }

    /// Per-segment copies of the values, in layout order.
    pub fn unflatten(&self) -> Vec<Vec<f64>> {
        self.segments
            .iter()
            .map(|s| self.values[s.range()].to_vec())
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(segments: Vec<Segment>, parts: &[Vec<f64>]) -> Result<Self> {
        if parts.len() != segments.len() {
            return Err(ProbeError::Argument(format!(
                "{} parts for {} segments",
                parts.len(),
                segments.len()
            )));
        }
        let mut values = Vec::new();
        for (seg, part) in segments.iter().zip(parts) {
            if part.len() != seg.len || values.len() != seg.start {
                return Err(ProbeError::Argument(format!(
                    "segment (layer {}, {}) expects {} values at offset {}",
                    seg.layer,
                    seg.role.as_str(),
                    seg.len,
                    seg.start
                )));
            }
            values.extend_from_slice(part);
        }
        Ok(Self { values, segments })
    }

    /// Segments with the given role, in layout order.
    pub fn segments_with(&self, role: Role) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(move |s| s.role == role)
    }

    /// Finds the segment for `(layer, role)`.
    pub fn find(&self, layer: usize, role: Role) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.layer == layer && s.role == role)
    }

    pub fn init(segments: Vec<Segment>, scheme: InitScheme) -> Self {
        let mut p = Self::zeros(segments);
        let seed = match scheme {
            InitScheme::Zero => return p,
            InitScheme::HeUniform { seed } | InitScheme::Default { seed } => seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segments = p.segments.clone();
        for seg in &segments {
            let fan_in = seg.fan_in.max(1) as f64;
            let vals = p.segment_mut(seg);
            match (seg.role, scheme) {
                (Role::BnScale, _) => vals.fill(1.0),
                (Role::BnShift, _) => vals.fill(0.0),
                (Role::Weight, InitScheme::HeUniform { .. }) => {
                    let bound = (6.0 / fan_in).sqrt();
                    vals.iter_mut()
                        .for_each(|v| *v = rng.random_range(-bound..=bound));
                }
                (Role::Bias, InitScheme::HeUniform { .. }) => vals.fill(0.0),
                (_, _) => {
                    let bound = 1.0 / fan_in.sqrt();
                    vals.iter_mut()
                        .for_each(|v| *v = rng.random_range(-bound..=bound));
                }
            }
        }
        p
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running statistics for every batch-norm layer, in depth-first order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub layers: Vec<BnRunning>,
}

impl RunningStats {
    pub fn fresh(features: &[usize]) -> Self {
        Self {
            layers: features
                .iter()
                .map(|&f| BnRunning {
                    mean: vec![0.0; f],
                    var: vec![1.0; f],
                })
                .collect(),
        }
    }

    /// Folds batch statistics (mean, unbiased variance) into the running averages.
    pub fn update(&mut self, batch: &[BnRunning], momentums: &[f64]) {
        for ((run, b), &m) in self.layers.iter_mut().zip(batch).zip(momentums) {
            for (r, &x) in run.mean.iter_mut().zip(&b.mean) {
                *r = (1.0 - m) * *r + m * x;
            }
            for (r, &x) in run.var.iter_mut().zip(&b.var) {
                *r = (1.0 - m) * *r + m * x;
            }
        }
    }
}
