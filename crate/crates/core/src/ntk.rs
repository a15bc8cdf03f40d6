//! Empirical neural tangent kernel slices, change metrics and width sweeps.

use faer::{Mat, Side};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{ProbeError, Result};
use crate::linalg::{gemm, View};
use crate::net::{Checkpoint, InitScheme, LayerSpec, Network, NetworkSpec, RunningStats};
use crate::tensor::{Shape, Tensor};
use crate::train::{train, EvalSpec, Model, TrainConfig};

/// `Φ_{ijkl} = ⟨∂f_k(x_i)/∂φ, ∂f_l(x_j)/∂φ⟩` over `N` images and `n` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkSlice {
    /// Index `((i·N + j)·n + k)·n + l`.
    pub values: Vec<f64>,
    pub images: usize,
    pub outputs: usize,
    pub image_ids: Vec<usize>,
    pub param_count: usize,
    /// Hex digest of the network spec and parameters.
    pub fingerprint: String,
}

impl NtkSlice {
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let (big_n, n) = (self.images, self.outputs);
        self.values[((i * big_n + j) * n + k) * n + l]
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Gram matrix `M[(i,k),(j,l)] = Φ_{ijkl}`.
    pub fn gram(&self) -> Mat<f64> {
        let (big_n, n) = (self.images, self.outputs);
        Mat::from_fn(big_n * n, big_n * n, |r, c| self.get(r / n, c / n, r % n, c % n))
    }

    /// `Φ_{ijkl} == Φ_{jilk}` bit for bit.
    pub fn exchange_symmetric(&self) -> bool {
        let (big_n, n) = (self.images, self.outputs);
        (0..big_n).all(|i| {
            (0..big_n).all(|j| {
                (0..n).all(|k| (0..n).all(|l| self.get(i, j, k, l).to_bits() == self.get(j, i, l, k).to_bits()))
            })
        })
    }

    /// Smallest Gram eigenvalue and the spectral norm.
    pub fn gram_extremes(&self) -> Result<(f64, f64)> {
        let ev = self
            .gram()
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| ProbeError::Numeric(format!("NTK Gram eigendecomposition failed: {e:?}")))?;
        let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
        let top = ev.iter().map(|v| v.abs()).fold(0.0, f64::max);
        Ok((min, top))
    }

    /// Minimum Gram eigenvalue is at least `−1e−8·‖M‖₂`.
    pub fn is_psd(&self) -> Result<bool> {
        let (min, top) = self.gram_extremes()?;
        Ok(min >= -1e-8 * top)
    }

    /// Values under `ntk`, `[N, n]` under `ntk-shape`, ids under `image-ids`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::array("ntk", self.values.clone());
        ck.arrays.extend(Checkpoint::array("ntk-shape", vec![self.images as f64, self.outputs as f64]).arrays);
        ck.arrays.extend(Checkpoint::array("image-ids", self.image_ids.iter().map(|&i| i as f64).collect()).arrays);
        ck
    }
}

/// Hex SHA-256 of the spec JSON followed by the little-endian parameters.
pub fn fingerprint(spec: &NetworkSpec, params: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(spec.to_json().as_bytes());
    for p in params {
        h.update(p.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// NTK slice over the rows of `images` (eval-mode forward).
pub fn sample_ntk(
    net: &Network,
    params: &[f64],
    stats: &RunningStats,
    images: &Tensor,
    image_ids: &[usize],
) -> Result<NtkSlice> {
    let big_n = images.count;
    if big_n < 2 {
        return Err(ProbeError::Argument(format!("NTK slice needs at least 2 images, got {big_n}")));
    }
    if image_ids.len() != big_n {
        return Err(ProbeError::Argument(format!("{} image ids for {big_n} images", image_ids.len())));
    }
    let n = net.classes();
    let p = params.len();
    let rows = big_n * n;
    let mut jac = Vec::with_capacity(rows * p);
    for i in 0..big_n {
        jac.extend(net.jacobian(params, stats, images.example(i))?);
    }
    let mut g = vec![0.0; rows * rows];
    gemm(1.0, &jac, View::row_major(rows, p), &jac, View::transposed(rows, p), 0.0, &mut g);
    for a in 0..rows {
        for b in a + 1..rows {
            g[b * rows + a] = g[a * rows + b];
        }
    }
    let mut values = vec![0.0; rows * rows];
    for i in 0..big_n {
        for j in 0..big_n {
            for k in 0..n {
                for l in 0..n {
                    values[((i * big_n + j) * n + k) * n + l] = g[(i * n + k) * rows + j * n + l];
                }
            }
        }
    }
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(ProbeError::Numeric(format!("non-finite NTK entry at flat index {bad}")));
    }
    Ok(NtkSlice {
        values,
        images: big_n,
        outputs: n,
        image_ids: image_ids.to_vec(),
        param_count: p,
        fingerprint: fingerprint(net.spec(), params),
    })
}

fn same_shape(a: &NtkSlice, b: &NtkSlice) -> Result<()> {
    if a.images != b.images || a.outputs != b.outputs {
        return Err(ProbeError::Argument(format!(
            "NTK shapes differ: {}x{} vs {}x{}",
            a.images, a.outputs, b.images, b.outputs
        )));
    }
    Ok(())
}

/// `‖b − a‖_F / ‖a‖_F` over flattened arrays.
pub fn relative_change_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ProbeError::Argument(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    let base = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if base == 0.0 {
        return Err(ProbeError::UndefinedMetric("relative change from an all-zero kernel".into()));
    }
    let diff = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
    Ok(diff / base)
}

/// Pearson correlation with population variances.
pub fn correlation_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(ProbeError::Argument(format!("lengths differ or empty: {} vs {}", a.len(), b.len())));
    }
    let len = a.len() as f64;
    let ma = a.iter().sum::<f64>() / len;
    let mb = b.iter().sum::<f64>() / len;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(ProbeError::UndefinedMetric("correlation with a constant kernel".into()));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

pub fn relative_change(phi0: &NtkSlice, phi1: &NtkSlice) -> Result<f64> {
    same_shape(phi0, phi1)?;
    relative_change_values(&phi0.values, &phi1.values)
}

pub fn correlation(phi0: &NtkSlice, phi1: &NtkSlice) -> Result<f64> {
    same_shape(phi0, phi1)?;
    correlation_values(&phi0.values, &phi1.values)
}

/// Architecture families for width sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Family {
    /// One hidden layer.
    Mlp2,
    /// Three hidden layers.
    Mlp4,
    /// Four 3x3 conv layers with two pools, then two dense layers.
    Convnet6,
    /// Conv stem and four two-conv residual blocks.
    Residual { bn: bool, skip: bool },
}

impl Family {
    pub fn label(&self) -> String {
        match self {
            Family::Mlp2 => "mlp2".into(),
            Family::Mlp4 => "mlp4".into(),
            Family::Convnet6 => "convnet6".into(),
            Family::Residual { bn, skip } => format!(
                "residual4-{}-{}",
                if *bn { "bn" } else { "nobn" },
                if *skip { "skip" } else { "noskip" }
            ),
        }
    }

    pub fn spec(&self, input: Shape, width: usize, classes: usize) -> Result<NetworkSpec> {
        if width == 0 {
            return Err(ProbeError::Argument("width must be positive".into()));
        }
        let mut layers = Vec::new();
        match *self {
            Family::Mlp2 | Family::Mlp4 => {
                if matches!(input, Shape::Image { .. }) {
                    layers.push(LayerSpec::Flatten);
                }
                let hidden = if *self == Family::Mlp2 { 1 } else { 3 };
                let mut prev = input.size();
                for _ in 0..hidden {
                    layers.push(LayerSpec::dense(prev, width));
                    layers.push(LayerSpec::Relu);
                    prev = width;
                }
                layers.push(LayerSpec::dense(prev, classes));
            }
            Family::Convnet6 => {
                let (c, h, w) = image_dims(input, 4)?;
                layers.extend([
                    LayerSpec::conv(c, width, 3, 1),
                    LayerSpec::Relu,
                    LayerSpec::conv(width, width, 3, 1),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { window: 2 },
                    LayerSpec::conv(width, 2 * width, 3, 1),
                    LayerSpec::Relu,
                    LayerSpec::conv(2 * width, 2 * width, 3, 1),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { window: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::dense(2 * width * (h / 4) * (w / 4), width),
                    LayerSpec::Relu,
                    LayerSpec::dense(width, classes),
                ]);
            }
            Family::Residual { bn, skip } => {
                let (c, h, w) = image_dims(input, 2)?;
                layers.push(LayerSpec::conv(c, width, 3, 1));
                if bn {
                    layers.push(LayerSpec::batch_norm(width));
                }
                layers.push(LayerSpec::Relu);
                for _ in 0..4 {
                    let mut inner = vec![LayerSpec::conv(width, width, 3, 1)];
                    if bn {
                        inner.push(LayerSpec::batch_norm(width));
                    }
                    inner.push(LayerSpec::Relu);
                    inner.push(LayerSpec::conv(width, width, 3, 1));
                    if bn {
                        inner.push(LayerSpec::batch_norm(width));
                    }
                    layers.push(LayerSpec::Residual { layers: inner, skip });
                    layers.push(LayerSpec::Relu);
                }
                layers.extend([
                    LayerSpec::MaxPool { window: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::dense(width * (h / 2) * (w / 2), classes),
                ]);
            }
        }
        let spec = NetworkSpec { input, layers, classes };
        spec.output_shape()?;
        Ok(spec)
    }
}

fn image_dims(input: Shape, divisor: usize) -> Result<(usize, usize, usize)> {
    match input {
        Shape::Image { channels, height, width } if height % divisor == 0 && width % divisor == 0 => {
            Ok((channels, height, width))
        }
        other => Err(ProbeError::Argument(format!(
            "conv families need image inputs with sides divisible by {divisor}, got {other}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub family: Family,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub sample_seed: u64,
    pub train: TrainConfig,
    /// Scales every learning rate by `reference / width` when set.
    #[serde(default)]
    pub lr_reference_width: Option<usize>,
    /// Record `Φ_t` against `Φ0` every this many epochs.
    #[serde(default)]
    pub track_every: Option<usize>,
}

fn default_samples() -> usize {
    25
}

/// One sweep cell: columns of the sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: String,
    pub width: usize,
    pub param_count: usize,
    pub seed: u64,
    pub norm0: f64,
    pub norm1: f64,
    pub rel_change: f64,
    pub correlation: f64,
    pub test_acc: f64,
    pub param_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRow {
    pub family: String,
    pub width: usize,
    pub seed: u64,
    pub epoch: usize,
    pub rel_change: f64,
    pub correlation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub width: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub evolution: Vec<EvolutionRow>,
    pub failures: Vec<SweepFailure>,
    pub image_ids: Vec<usize>,
}

impl SweepOutcome {
    /// Mean correlation per width, in sweep order.
    pub fn mean_correlation(&self) -> Vec<(usize, f64)> {
        let mut widths: Vec<usize> = self.rows.iter().map(|r| r.width).collect();
        widths.dedup();
        widths
            .into_iter()
            .map(|w| {
                let cs: Vec<f64> = self.rows.iter().filter(|r| r.width == w).map(|r| r.correlation).collect();
                (w, cs.iter().sum::<f64>() / cs.len() as f64)
            })
            .collect()
    }
}

/// Trains every (width, seed) cell, comparing the NTK on a fixed image sample
/// before and after training. Failed cells are recorded and skipped.
pub fn width_sweep(cfg: &SweepConfig, data: &Dataset) -> Result<SweepOutcome> {
    if cfg.widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ProbeError::Config("sweep widths must be strictly ascending".into()));
    }
    let errs = cfg.train.validate();
    if !errs.is_empty() {
        return Err(ProbeError::Config(errs.join("; ")));
    }
    let n_train = data.train.len();
    if cfg.samples < 2 || cfg.samples > n_train {
        return Err(ProbeError::Config(format!("cannot draw {} images from {n_train}", cfg.samples)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let mut ids = sample(&mut rng, n_train, cfg.samples).into_vec();
    ids.sort_unstable();
    let images = data.train.inputs.select(&ids);
    let mut out = SweepOutcome { image_ids: ids.clone(), ..Default::default() };
    for &width in &cfg.widths {
        for &seed in &cfg.seeds {
            match sweep_cell(cfg, data, &images, &ids, width, seed, &mut out.evolution) {
                Ok(row) => out.rows.push(row),
                Err(e) => out.failures.push(SweepFailure { width, seed, error: e.to_string() }),
            }
        }
    }
    Ok(out)
}

fn sweep_cell(
    cfg: &SweepConfig,
    data: &Dataset,
    images: &Tensor,
    ids: &[usize],
    width: usize,
    seed: u64,
    evolution: &mut Vec<EvolutionRow>,
) -> Result<SweepRow> {
    let spec = cfg.family.spec(data.shape(), width, data.classes)?;
    let net = Network::new(spec)?;
    let start = net.init(InitScheme::HeUniform { seed });
    let mut model = Model::new(&net, start.clone());
    let phi0 = sample_ntk(&net, &model.params.values, &model.stats, images, ids)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    if let Some(reference) = cfg.lr_reference_width {
        tcfg.schedule = tcfg.schedule.scaled(reference as f64 / width as f64)?;
    }
    let label = cfg.family.label();
    let mut tracked = Vec::new();
    train(&net, &mut model, &data.train, &tcfg, &EvalSpec::default(), |epoch, m| {
        if let Some(every) = cfg.track_every.filter(|&e| e > 0) {
            if (epoch + 1) % every == 0 {
                let phi_t = sample_ntk(&net, &m.params.values, &m.stats, images, ids)?;
                tracked.push(EvolutionRow {
                    family: label.clone(),
                    width,
                    seed,
                    epoch,
                    rel_change: relative_change(&phi0, &phi_t)?,
                    correlation: correlation(&phi0, &phi_t)?,
                });
            }
        }
        Ok(())
    })?;
    evolution.extend(tracked);
    let phi1 = sample_ntk(&net, &model.params.values, &model.stats, images, ids)?;
    let param_change = model
        .params
        .values
        .iter()
        .zip(&start.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(SweepRow {
        family: label,
        width,
        param_count: net.param_count(),
        seed,
        norm0: phi0.frobenius(),
        norm1: phi1.frobenius(),
        rel_change: relative_change(&phi0, &phi1)?,
        correlation: correlation(&phi0, &phi1)?,
        test_acc: net.accuracy(&model.params.values, &model.stats, &data.test)?,
        param_change,
    })
}

pub const SWEEP_HEADER: &str = "family,width,P,seed,norm0,norm1,rel_change,correlation,test_acc,param_change";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.family, r.width, r.param_count, r.seed, r.norm0, r.norm1, r.rel_change, r.correlation, r.test_acc, r.param_change
        ));
    }
    out
}
