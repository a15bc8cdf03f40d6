//! Singular spectra of dense and convolutional layers, effective rank, and
//! rank-clipping fine-tuning.
//!
//! Conv layers are analysed as stride-1 circular convolutions over their input
//! plane: every channel pair's kernel is embedded centered at the origin of an
//! `h x w` torus, transformed with a 2-D DFT, and each frequency contributes the
//! singular values of its `c_out x c_in` complex matrix.

use faer::{c64, Mat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::net::{Mode, Network, ParamVector, Role};
use crate::tensor::Batch;
use crate::train::{adversarial_train_epoch, robust_accuracy, AttackConfig, LrSchedule, Model, SgdState, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OperatorKind {
    Dense { rows: usize, cols: usize },
    Conv { height: usize, width: usize, kernel: usize, in_channels: usize, out_channels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularSpectrum {
    pub layer: usize,
    /// Descending, nonnegative.
    pub values: Vec<f64>,
    pub effective_rank: f64,
    pub kind: OperatorKind,
    /// Set for conv layers whose zero padding or stride departs from the circular model.
    pub circular_approximation: bool,
}

/// Conv weights in network layout `[out][in][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
}

impl ConvKernel {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, weights: Vec<f64>) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel == 0 {
            return Err(ProbeError::Argument("conv kernel dimensions must be positive".into()));
        }
        if weights.len() != out_channels * in_channels * kernel * kernel {
            return Err(ProbeError::Argument(format!(
                "{}x{}x{k}x{k} kernel needs {} weights, got {}",
                out_channels,
                in_channels,
                out_channels * in_channels * kernel * kernel,
                weights.len(),
                k = kernel
            )));
        }
        Ok(Self { out_channels, in_channels, kernel, weights })
    }

    pub fn at(&self, o: usize, c: usize, a: usize, b: usize) -> f64 {
        let k = self.kernel;
        self.weights[((o * self.in_channels + c) * k + a) * k + b]
    }

    /// Torus offset of tap `a` on a side of length `n`.
    pub fn offset(&self, a: usize, n: usize) -> usize {
        (a + n - (self.kernel - 1) / 2) % n
    }
}

/// `Σσ / √(Σσ²)`.
pub fn effective_rank(values: &[f64]) -> Result<f64> {
    let fro = values.iter().map(|s| s * s).sum::<f64>().sqrt();
    if fro == 0.0 || !fro.is_finite() {
        return Err(ProbeError::UndefinedMetric("effective rank of a zero operator".into()));
    }
    Ok(values.iter().sum::<f64>() / fro)
}

fn descending(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn svd_err(e: impl std::fmt::Debug) -> ProbeError {
    ProbeError::Numeric(format!("SVD failed: {e:?}"))
}

fn dense_mat(rows: usize, cols: usize, w: &[f64]) -> Result<Mat<f64>> {
    if rows == 0 || cols == 0 || w.len() != rows * cols {
        return Err(ProbeError::Argument(format!("{} values for a {rows}x{cols} matrix", w.len())));
    }
    Ok(Mat::from_fn(rows, cols, |i, j| w[i * cols + j]))
}

/// Singular values of a row-major `rows x cols` matrix.
pub fn dense_singular_values(rows: usize, cols: usize, w: &[f64]) -> Result<Vec<f64>> {
    Ok(descending(dense_mat(rows, cols, w)?.singular_values().map_err(svd_err)?))
}

fn map_dense(rows: usize, cols: usize, w: &[f64], f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let svd = dense_mat(rows, cols, w)?.thin_svd().map_err(svd_err)?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let r = s.nrows();
    let g: Vec<f64> = (0..r).map(|i| f(s[i])).collect();
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = (0..r).map(|t| u[(i, t)] * g[t] * v[(j, t)]).sum();
        }
    }
    Ok(out)
}

/// Zeroes every singular value below `tau`.
pub fn clip_low_dense(rows: usize, cols: usize, w: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_threshold(tau, "tau")?;
    map_dense(rows, cols, w, |s| if s < tau { 0.0 } else { s })
}

/// Caps every singular value at `cap`.
pub fn clip_high_dense(rows: usize, cols: usize, w: &[f64], cap: f64) -> Result<Vec<f64>> {
    check_cap(cap)?;
    map_dense(rows, cols, w, |s| s.min(cap))
}

fn check_threshold(tau: f64, name: &str) -> Result<()> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(ProbeError::Argument(format!("{name} must be finite and >= 0, got {tau}")));
    }
    Ok(())
}

fn check_cap(cap: f64) -> Result<()> {
    if !(cap > 0.0) || !cap.is_finite() {
        return Err(ProbeError::Argument(format!("cap must be finite and > 0, got {cap}")));
    }
    Ok(())
}

/// In-place 2-D DFT of a row-major `h x w` plane; the inverse is normalized.
fn fft2(planner: &mut FftPlanner<f64>, buf: &mut [c64], h: usize, w: usize, inverse: bool) {
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(buf);
    let mut column = vec![c64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }
}

fn check_plane(kernel: &ConvKernel, h: usize, w: usize) -> Result<()> {
    if h < kernel.kernel || w < kernel.kernel {
        return Err(ProbeError::Argument(format!(
            "{h}x{w} plane is smaller than the {k}x{k} kernel",
            k = kernel.kernel
        )));
    }
    Ok(())
}

/// DFT planes `[o][c][h·w]` of the centered embedded kernel.
fn kernel_spectrum(planner: &mut FftPlanner<f64>, kernel: &ConvKernel, h: usize, w: usize) -> Vec<Vec<c64>> {
    let k = kernel.kernel;
    let mut planes = Vec::with_capacity(kernel.out_channels * kernel.in_channels);
    for o in 0..kernel.out_channels {
        for c in 0..kernel.in_channels {
            let mut buf = vec![c64::new(0.0, 0.0); h * w];
            for a in 0..k {
                for b in 0..k {
                    buf[kernel.offset(a, h) * w + kernel.offset(b, w)] += c64::new(kernel.at(o, c, a, b), 0.0);
                }
            }
            fft2(planner, &mut buf, h, w, false);
            planes.push(buf);
        }
    }
    planes
}

fn frequency_matrix(planes: &[Vec<c64>], cout: usize, cin: usize, f: usize) -> Mat<c64> {
    Mat::from_fn(cout, cin, |o, c| planes[o * cin + c][f])
}

/// All `h·w·min(c_in, c_out)` singular values of the circular convolution
/// operator on an `h x w` plane, descending.
pub fn conv_singular_values(kernel: &ConvKernel, h: usize, w: usize) -> Result<Vec<f64>> {
    check_plane(kernel, h, w)?;
    let mut planner = FftPlanner::new();
    let planes = kernel_spectrum(&mut planner, kernel, h, w);
    let mut out = Vec::with_capacity(h * w * kernel.out_channels.min(kernel.in_channels));
    for f in 0..h * w {
        let m = frequency_matrix(&planes, kernel.out_channels, kernel.in_channels, f);
        out.extend(m.singular_values().map_err(svd_err)?);
    }
    Ok(descending(out))
}

fn map_conv(kernel: &ConvKernel, h: usize, w: usize, g: impl Fn(f64) -> f64) -> Result<ConvKernel> {
    check_plane(kernel, h, w)?;
    let (cout, cin, k) = (kernel.out_channels, kernel.in_channels, kernel.kernel);
    let mut planner = FftPlanner::new();
    let mut planes = kernel_spectrum(&mut planner, kernel, h, w);
    for f in 0..h * w {
        let m = frequency_matrix(&planes, cout, cin, f);
        let svd = m.thin_svd().map_err(svd_err)?;
        let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
        let r = s.nrows();
        let gs: Vec<f64> = (0..r).map(|i| g(s[i].re)).collect();
        for o in 0..cout {
            for c in 0..cin {
                planes[o * cin + c][f] = (0..r).map(|t| u[(o, t)] * gs[t] * v[(c, t)].conj()).sum();
            }
        }
    }
    let mut weights = vec![0.0; cout * cin * k * k];
    for o in 0..cout {
        for c in 0..cin {
            let plane = &mut planes[o * cin + c];
            fft2(&mut planner, plane, h, w, true);
            for a in 0..k {
                for b in 0..k {
                    weights[((o * cin + c) * k + a) * k + b] = plane[kernel.offset(a, h) * w + kernel.offset(b, w)].re;
                }
            }
        }
    }
    ConvKernel::new(cout, cin, k, weights)
}

/// Per-frequency truncation below `tau`, then pruning back to the `k x k` support.
pub fn clip_low_conv(kernel: &ConvKernel, h: usize, w: usize, tau: f64) -> Result<ConvKernel> {
    check_threshold(tau, "tau")?;
    map_conv(kernel, h, w, |s| if s < tau { 0.0 } else { s })
}

/// Per-frequency cap at `cap`, then pruning back to the `k x k` support.
pub fn clip_high_conv(kernel: &ConvKernel, h: usize, w: usize, cap: f64) -> Result<ConvKernel> {
    check_cap(cap)?;
    map_conv(kernel, h, w, |s| s.min(cap))
}

/// Linear-interpolated quantile of `values`, `q ∈ [0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(ProbeError::Argument(format!("quantile {q} of {} values", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// A weight matrix or conv kernel located in the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankLayer {
    pub layer: usize,
    pub start: usize,
    pub kind: OperatorKind,
    pub circular_approximation: bool,
}

/// Dense and conv layers of `net` in depth-first order.
pub fn rank_layers(net: &Network) -> Vec<RankLayer> {
    let convs = net.conv_layers();
    let mut out = Vec::new();
    for seg in net.segments().iter().filter(|s| s.role == Role::Weight) {
        let kind_layer = match convs.iter().find(|c| c.layer == seg.layer) {
            Some(c) => RankLayer {
                layer: seg.layer,
                start: seg.start,
                kind: OperatorKind::Conv {
                    height: c.height,
                    width: c.width,
                    kernel: c.kernel,
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                },
                circular_approximation: c.stride != 1 || c.kernel > 1,
            },
            None => RankLayer {
                layer: seg.layer,
                start: seg.start,
                kind: OperatorKind::Dense { rows: seg.len / seg.fan_in, cols: seg.fan_in },
                circular_approximation: false,
            },
        };
        out.push(kind_layer);
    }
    out
}

impl RankLayer {
    pub fn len(&self) -> usize {
        match self.kind {
            OperatorKind::Dense { rows, cols } => rows * cols,
            OperatorKind::Conv { kernel, in_channels, out_channels, .. } => out_channels * in_channels * kernel * kernel,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn singular_values(&self, params: &[f64]) -> Result<Vec<f64>> {
        let w = &params[self.start..self.start + self.len()];
        match self.kind {
            OperatorKind::Dense { rows, cols } => dense_singular_values(rows, cols, w),
            OperatorKind::Conv { height, width, kernel, in_channels, out_channels } => conv_singular_values(
                &ConvKernel::new(out_channels, in_channels, kernel, w.to_vec())?,
                height,
                width,
            ),
        }
    }

    pub fn spectrum(&self, params: &[f64]) -> Result<SingularSpectrum> {
        let values = self.singular_values(params)?;
        Ok(SingularSpectrum {
            layer: self.layer,
            effective_rank: effective_rank(&values)?,
            values,
            kind: self.kind,
            circular_approximation: self.circular_approximation,
        })
    }

    /// Replaces the layer's weights by their clipped version.
    pub fn clip(&self, params: &mut [f64], mode: RankMode, threshold: f64) -> Result<()> {
        let range = self.start..self.start + self.len();
        let w = &params[range.clone()];
        let new = match (self.kind, mode) {
            (_, RankMode::Baseline) => return Ok(()),
            (OperatorKind::Dense { rows, cols }, RankMode::RankMin) => clip_low_dense(rows, cols, w, threshold)?,
            (OperatorKind::Dense { rows, cols }, RankMode::RankMax) => clip_high_dense(rows, cols, w, threshold)?,
            (OperatorKind::Conv { height, width, kernel, in_channels, out_channels }, m) => {
                let ker = ConvKernel::new(out_channels, in_channels, kernel, w.to_vec())?;
                let clipped = if m == RankMode::RankMin {
                    clip_low_conv(&ker, height, width, threshold)?
                } else {
                    clip_high_conv(&ker, height, width, threshold)?
                };
                clipped.weights
            }
        };
        params[range].copy_from_slice(&new);
        Ok(())
    }
}

pub fn layer_spectra(net: &Network, params: &[f64]) -> Result<Vec<SingularSpectrum>> {
    rank_layers(net).iter().map(|l| l.spectrum(params)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    /// Fine-tune without clipping.
    Baseline,
    /// Zero singular values below the layer's quantile.
    RankMin,
    /// Cap singular values at the layer's quantile.
    RankMax,
}

/// Clips every dense and conv layer at the `q` quantile of its own spectrum.
pub fn clip_network(net: &Network, params: &mut ParamVector, mode: RankMode, q: f64) -> Result<()> {
    for layer in rank_layers(net) {
        let values = layer.singular_values(&params.values)?;
        let threshold = quantile(&values, q)?;
        if mode == RankMode::RankMax && threshold <= 0.0 {
            continue;
        }
        layer.clip(&mut params.values, mode, threshold)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: RankMode,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Clip at the start of each of the first this many epochs.
    #[serde(default = "default_clip_epochs")]
    pub clip_epochs: usize,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    /// Training settings; `epochs` is taken from this config instead.
    pub train: TrainConfig,
    #[serde(default)]
    pub eval_attack: Option<AttackConfig>,
    #[serde(default)]
    pub attack_limit: Option<usize>,
}

fn default_epochs() -> usize {
    15
}

fn default_clip_epochs() -> usize {
    6
}

fn default_quantile() -> f64 {
    0.5
}

impl FinetuneConfig {
    pub fn new(mode: RankMode, train: TrainConfig) -> Self {
        let train = TrainConfig { schedule: LrSchedule::Named { name: "finetune".into() }, ..train };
        Self {
            mode,
            epochs: default_epochs(),
            clip_epochs: default_clip_epochs(),
            quantile: default_quantile(),
            train,
            eval_attack: None,
            attack_limit: None,
        }
    }
}

/// One row of the spectrum trace; epoch 0 is the starting model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub epoch: usize,
    pub layer: usize,
    pub effective_rank: f64,
    pub top: f64,
    pub bottom: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub trace: Vec<SpectrumRow>,
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
}

impl FinetuneResult {
    /// Effective rank per layer at the last recorded epoch.
    pub fn final_ranks(&self) -> Vec<(usize, f64)> {
        let last = self.trace.iter().map(|r| r.epoch).max().unwrap_or(0);
        self.trace.iter().filter(|r| r.epoch == last).map(|r| (r.layer, r.effective_rank)).collect()
    }
}

fn push_spectra(net: &Network, params: &[f64], epoch: usize, trace: &mut Vec<SpectrumRow>) -> Result<()> {
    for s in layer_spectra(net, params)? {
        trace.push(SpectrumRow {
            epoch,
            layer: s.layer,
            effective_rank: s.effective_rank,
            top: s.values[0],
            bottom: *s.values.last().unwrap_or(&0.0),
        });
    }
    Ok(())
}

/// Fine-tunes a trained model, clipping its spectra early on, and traces the
/// per-layer effective rank after every epoch.
pub fn rank_finetune(
    net: &Network,
    model: &mut Model,
    train_data: &Batch,
    test_data: &Batch,
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult> {
    let errs = cfg.train.validate();
    if !errs.is_empty() {
        return Err(ProbeError::Config(errs.join("; ")));
    }
    if !(0.0..=1.0).contains(&cfg.quantile) {
        return Err(ProbeError::Config(format!("quantile must lie in [0, 1], got {}", cfg.quantile)));
    }
    let schedule = cfg.train.schedule.resolve()?;
    let mut state = SgdState::default();
    let mut trace = Vec::new();
    let mut losses = Vec::new();
    let mut warnings = Vec::new();
    push_spectra(net, &model.params.values, 0, &mut trace)?;
    for epoch in 0..cfg.epochs {
        let clipping = cfg.mode != RankMode::Baseline && epoch < cfg.clip_epochs;
        let before = if clipping {
            let loss = net.loss(&model.params.values, &model.stats, train_data, Mode::Eval)?;
            clip_network(net, &mut model.params, cfg.mode, cfg.quantile)?;
            Some(loss)
        } else {
            None
        };
        adversarial_train_epoch(net, model, &mut state, train_data, &cfg.train, epoch, schedule.lr(epoch)?)?;
        let loss = net.loss(&model.params.values, &model.stats, train_data, Mode::Eval)?;
        if let Some(b) = before {
            if loss > 2.0 * b {
                warnings.push(format!("epoch {epoch}: loss {loss} exceeds twice the pre-clip loss {b}"));
            }
        }
        losses.push(loss);
        push_spectra(net, &model.params.values, epoch + 1, &mut trace)?;
    }
    let clean_acc = net.accuracy(&model.params.values, &model.stats, test_data)?;
    let robust_acc = match &cfg.eval_attack {
        Some(a) => {
            let limit = cfg.attack_limit.unwrap_or(test_data.len()).min(test_data.len());
            let subset = test_data.select(&(0..limit).collect::<Vec<_>>());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5EED_0A77);
            Some(robust_accuracy(net, &model.params.values, &model.stats, &subset, a, 256, &mut rng)?)
        }
        None => None,
    };
    Ok(FinetuneResult { trace, losses, warnings, clean_acc, robust_acc })
}

pub const SPECTRUM_HEADER: &str = "epoch,layer,effective_rank,top,bottom";

pub fn spectrum_csv(rows: &[SpectrumRow]) -> String {
    let mut out = format!("{SPECTRUM_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.layer, r.effective_rank, r.top, r.bottom));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        let k = ConvKernel::new(1, 1, 3, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = conv_singular_values(&k, 5, 5).unwrap();
        assert_eq!(s.len(), 25);
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn scalar_kernel_gives_its_magnitude() {
        let k = ConvKernel::new(1, 1, 1, vec![-2.5]).unwrap();
        let s = conv_singular_values(&k, 4, 4).unwrap();
        assert!(s.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn plane_smaller_than_kernel_is_rejected() {
        let k = ConvKernel::new(1, 1, 3, vec![1.0; 9]).unwrap();
        assert!(matches!(conv_singular_values(&k, 2, 4), Err(ProbeError::Argument(_))));
    }

    #[test]
    fn effective_rank_examples() {
        assert!((effective_rank(&[3.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((effective_rank(&[1.0; 4]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(effective_rank(&[0.0, 0.0]), Err(ProbeError::UndefinedMetric(_))));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5).unwrap(), 1.5);
        assert!(quantile(&[], 0.5).is_err());
    }
}
