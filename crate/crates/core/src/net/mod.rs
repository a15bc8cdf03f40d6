//! Feed-forward networks with exact forward evaluation, reverse-mode
//! gradients and per-output parameter Jacobians.
//!
//! A [`NetworkSpec`] is compiled once into a [`Network`], which owns the
//! parameter layout and the shape of every intermediate activation. All
//! evaluation methods take the flat parameter slice and the batch-norm
//! running statistics explicitly, so a `Network` is immutable and can be
//! shared freely.

mod checkpoint;
mod loss;
mod params;
mod spec;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use loss::{accuracy, argmax, cross_entropy, cross_entropy_grad};
pub use params::{BnRunning, InitScheme, ParamVector, Role, RunningStats, Segment};
pub use spec::{LayerSpec, NetworkSpec};

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::linalg::{gemm, View};
use crate::tensor::{Batch, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch-norm normalizes with batch statistics.
    Train,
    /// Batch-norm normalizes with the stored running statistics.
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Dense {
        input: usize,
        output: usize,
        w: usize,
        b: usize,
    },
    Relu,
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        w: usize,
        b: usize,
    },
    BatchNorm {
        eps: f64,
        scale: usize,
        shift: usize,
        slot: usize,
    },
    MaxPool {
        window: usize,
    },
    Flatten,
    Residual {
        nodes: Vec<Node>,
        skip: bool,
    },
}

#[derive(Clone, Debug)]
struct Node {
    layer: usize,
    op: Op,
    input: Shape,
    output: Shape,
}

enum Cache {
    Input(Tensor),
    PreActivation(Tensor),
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Pool { argmax: Vec<usize> },
    Empty,
}

/// Result of a forward pass.
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Per batch-norm layer batch mean and unbiased variance (train mode only).
    pub batch_stats: Vec<BnRunning>,
    tape: Vec<Cache>,
}

impl ForwardOutput {
    /// Inputs to every ReLU, in execution order.
    pub fn pre_activations(&self) -> impl Iterator<Item = &Tensor> {
        self.tape.iter().filter_map(|c| match c {
            Cache::PreActivation(t) => Some(t),
            _ => None,
        })
    }

    /// Smallest ReLU input over the whole batch, `None` without ReLUs.
    pub fn min_pre_activation(&self) -> Option<f64> {
        self.pre_activations()
            .flat_map(|t| t.data.iter().copied())
            .reduce(f64::min)
    }
}

/// Mean loss, its gradient, and side products of the forward pass.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub batch_stats: Vec<BnRunning>,
    pub min_pre_activation: Option<f64>,
}

/// A compiled, validated network spec.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    nodes: Vec<Node>,
    segments: Vec<Segment>,
    bn_features: Vec<usize>,
    bn_momentums: Vec<f64>,
}

struct Builder {
    counter: usize,
    segments: Vec<Segment>,
    offset: usize,
    bn_features: Vec<usize>,
    bn_momentums: Vec<f64>,
}

impl Builder {
    fn push(&mut self, layer: usize, role: Role, len: usize, fan_in: usize) -> usize {
        let start = self.offset;
        self.segments.push(Segment { layer, role, start, len, fan_in });
        self.offset += len;
        start
    }

    fn compile(&mut self, layers: &[LayerSpec], mut shape: Shape) -> Result<Vec<Node>> {
        let mut nodes = Vec::with_capacity(layers.len());
        for layer in layers {
            let idx = self.counter;
            let mut probe = idx;
            // Validate this layer (and any nested ones) before allocating parameters.
            let output = spec::infer(std::slice::from_ref(layer), shape, &mut probe)?;
            self.counter += 1;
            let op = match *layer {
                LayerSpec::Dense { input, output } => {
                    let w = self.push(idx, Role::Weight, input * output, input);
                    let b = self.push(idx, Role::Bias, output, input);
                    Op::Dense { input, output, w, b }
                }
                LayerSpec::Relu => Op::Relu,
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                    let fan_in = in_channels * kernel * kernel;
                    let w = self.push(idx, Role::Weight, out_channels * fan_in, fan_in);
                    let b = self.push(idx, Role::Bias, out_channels, fan_in);
                    Op::Conv {
                        cin: in_channels,
                        cout: out_channels,
                        k: kernel,
                        stride,
                        pad: padding,
                        w,
                        b,
                    }
                }
                LayerSpec::BatchNorm { features, eps, momentum } => {
                    let scale = self.push(idx, Role::BnScale, features, features);
                    let shift = self.push(idx, Role::BnShift, features, features);
                    let slot = self.bn_features.len();
                    self.bn_features.push(features);
                    self.bn_momentums.push(momentum);
                    Op::BatchNorm { eps, scale, shift, slot }
                }
                LayerSpec::MaxPool { window } => Op::MaxPool { window },
                LayerSpec::Flatten => Op::Flatten,
                LayerSpec::Residual { ref layers, skip } => {
                    let inner = self.compile(layers, shape)?;
                    Op::Residual { nodes: inner, skip }
                }
            };
            nodes.push(Node { layer: idx, op, input: shape, output });
            shape = output;
        }
        Ok(nodes)
    }
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.output_shape()?;
        let mut b = Builder {
            counter: 0,
            segments: Vec::new(),
            offset: 0,
            bn_features: Vec::new(),
            bn_momentums: Vec::new(),
        };
        let nodes = b.compile(&spec.layers, spec.input)?;
        Ok(Self {
            spec,
            nodes,
            segments: b.segments,
            bn_features: b.bn_features,
            bn_momentums: b.bn_momentums,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn param_count(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.bn_features.is_empty()
    }

    pub fn bn_momentums(&self) -> &[f64] {
        &self.bn_momentums
    }

    pub fn fresh_stats(&self) -> RunningStats {
        RunningStats::fresh(&self.bn_features)
    }

    pub fn init(&self, scheme: InitScheme) -> ParamVector {
        ParamVector::init(self.segments.clone(), scheme)
    }

    pub fn wrap(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::from_values(self.segments.clone(), values)
    }

    /// Kernel shape and input spatial size of every conv layer, by layer index.
    pub fn conv_layers(&self) -> Vec<ConvInfo> {
        fn walk(nodes: &[Node], out: &mut Vec<ConvInfo>) {
            for n in nodes {
                match n.op {
                    Op::Conv { cin, cout, k, stride, pad, w, .. } => {
                        if let Shape::Image { height, width, .. } = n.input {
                            out.push(ConvInfo {
                                layer: n.layer,
                                in_channels: cin,
                                out_channels: cout,
                                kernel: k,
                                stride,
                                padding: pad,
                                height,
                                width,
                                weight_start: w,
                            });
                        }
                    }
                    Op::Residual { ref nodes, .. } => walk(nodes, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.nodes, &mut out);
        out
    }

    fn check(&self, params: &[f64], stats: &RunningStats, inputs: &Tensor) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(ProbeError::Argument(format!(
                "network has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if stats.layers.len() != self.bn_features.len() {
            return Err(ProbeError::Argument(format!(
                "network has {} batch-norm layers, running stats cover {}",
                self.bn_features.len(),
                stats.layers.len()
            )));
        }
        if inputs.shape != self.spec.input {
            return Err(ProbeError::Shape {
                layer: 0,
                kind: "input".into(),
                detail: format!("expects {}, got {}", self.spec.input, inputs.shape),
            });
        }
        Ok(())
    }

    /// Forward pass recording everything needed for reverse sweeps.
    pub fn forward(
        &self,
        params: &[f64],
        stats: &RunningStats,
        inputs: &Tensor,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        self.check(params, stats, inputs)?;
        let mut ctx = Fwd {
            params,
            stats,
            mode,
            tape: Some(Vec::new()),
            batch_stats: vec![BnRunning { mean: vec![], var: vec![] }; self.bn_features.len()],
        };
        let logits = ctx.run(&self.nodes, inputs.clone());
        Ok(ForwardOutput {
            logits,
            batch_stats: ctx.batch_stats,
            tape: ctx.tape.unwrap_or_default(),
        })
    }

    /// Logits only; nothing is recorded.
    pub fn predict(
        &self,
        params: &[f64],
        stats: &RunningStats,
        inputs: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        self.check(params, stats, inputs)?;
        let mut ctx = Fwd {
            params,
            stats,
            mode,
            tape: None,
            batch_stats: vec![BnRunning { mean: vec![], var: vec![] }; self.bn_features.len()],
        };
        Ok(ctx.run(&self.nodes, inputs.clone()))
    }

    pub fn loss(&self, params: &[f64], stats: &RunningStats, batch: &Batch, mode: Mode) -> Result<f64> {
        let logits = self.predict(params, stats, &batch.inputs, mode)?;
        cross_entropy(&logits, &batch.labels)
    }

    pub fn accuracy(&self, params: &[f64], stats: &RunningStats, batch: &Batch) -> Result<f64> {
        let logits = self.predict(params, stats, &batch.inputs, Mode::Eval)?;
        Ok(accuracy(&logits, &batch.labels))
    }

    /// Mean cross-entropy and its exact gradient. ReLU'(0) is taken as 0.
    pub fn loss_grad(
        &self,
        params: &[f64],
        stats: &RunningStats,
        batch: &Batch,
        mode: Mode,
    ) -> Result<LossGrad> {
        let fwd = self.forward(params, stats, &batch.inputs, mode)?;
        let (loss, dlogits) = cross_entropy_grad(&fwd.logits, &batch.labels)?;
        let mut grad = vec![0.0; params.len()];
        let mut cursor = fwd.tape.len();
        self.backward(&self.nodes, params, &fwd.tape, &mut cursor, dlogits, &mut grad, mode);
        let min_pre_activation = fwd.min_pre_activation();
        Ok(LossGrad {
            loss,
            grad,
            batch_stats: fwd.batch_stats,
            min_pre_activation,
        })
    }

    /// Mean loss and its gradient with respect to the inputs.
    pub fn input_grad(
        &self,
        params: &[f64],
        stats: &RunningStats,
        batch: &Batch,
        mode: Mode,
    ) -> Result<(f64, Tensor)> {
        let fwd = self.forward(params, stats, &batch.inputs, mode)?;
        let (loss, dlogits) = cross_entropy_grad(&fwd.logits, &batch.labels)?;
        let mut scratch = vec![0.0; params.len()];
        let mut cursor = fwd.tape.len();
        let g = self.backward(&self.nodes, params, &fwd.tape, &mut cursor, dlogits, &mut scratch, mode);
        Ok((loss, g))
    }

    /// `n x P` Jacobian of the logits at a single input (eval mode), row-major.
    pub fn jacobian(&self, params: &[f64], stats: &RunningStats, x: &[f64]) -> Result<Vec<f64>> {
        let inputs = Tensor::new(self.spec.input, 1, x.to_vec())?;
        let fwd = self.forward(params, stats, &inputs, Mode::Eval)?;
        let n = self.spec.classes;
        let p = params.len();
        let mut jac = vec![0.0; n * p];
        for k in 0..n {
            let mut seed = Tensor::zeros(Shape::flat(n), 1);
            seed.data[k] = 1.0;
            let mut cursor = fwd.tape.len();
            self.backward(
                &self.nodes,
                params,
                &fwd.tape,
                &mut cursor,
                seed,
                &mut jac[k * p..(k + 1) * p],
                Mode::Eval,
            );
        }
        Ok(jac)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        nodes: &[Node],
        params: &[f64],
        tape: &[Cache],
        cursor: &mut usize,
        mut grad: Tensor,
        gparams: &mut [f64],
        mode: Mode,
    ) -> Tensor {
        for node in nodes.iter().rev() {
            if let Op::Residual { nodes: inner, skip } = &node.op {
                let g_inner = self.backward(inner, params, tape, cursor, grad.clone(), gparams, mode);
                grad = if *skip {
                    let mut g = g_inner;
                    crate::linalg::axpy(1.0, &grad.data, &mut g.data);
                    g
                } else {
                    g_inner
                };
                continue;
            }
            *cursor -= 1;
            grad = backward_node(node, params, &tape[*cursor], grad, gparams);
        }
        grad
    }
}

/// Conv layer geometry exposed for spectral analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvInfo {
    pub layer: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub height: usize,
    pub width: usize,
    pub weight_start: usize,
}

struct Fwd<'a> {
    params: &'a [f64],
    stats: &'a RunningStats,
    mode: Mode,
    tape: Option<Vec<Cache>>,
    batch_stats: Vec<BnRunning>,
}

impl Fwd<'_> {
    fn record(&mut self, c: impl FnOnce() -> Cache) {
        if let Some(t) = self.tape.as_mut() {
            t.push(c());
        }
    }

    fn run(&mut self, nodes: &[Node], mut x: Tensor) -> Tensor {
        for node in nodes {
            x = self.step(node, x);
        }
        x
    }

    fn step(&mut self, node: &Node, x: Tensor) -> Tensor {
        let count = x.count;
        match node.op {
            Op::Dense { input, output, w, b } => {
                let mut y = Tensor::zeros(node.output, count);
                let weights = &self.params[w..w + input * output];
                let bias = &self.params[b..b + output];
                for r in 0..count {
                    y.example_mut(r).copy_from_slice(bias);
                }
                gemm(
                    1.0,
                    &x.data,
                    View::row_major(count, input),
                    weights,
                    View::transposed(output, input),
                    1.0,
                    &mut y.data,
                );
                self.record(|| Cache::Input(x));
                y
            }
            Op::Relu => {
                let mut y = x.clone();
                y.data.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v = 0.0
                    }
                });
                self.record(|| Cache::PreActivation(x));
                y
            }
            Op::Conv { cin, cout, k, stride, pad, w, b } => {
                let geo = ConvGeom::new(node.input, node.output, k, stride, pad);
                let ckk = cin * k * k;
                let weights = &self.params[w..w + cout * ckk];
                let bias = &self.params[b..b + cout];
                let mut y = Tensor::zeros(node.output, count);
                let mut col = vec![0.0; ckk * geo.out_len()];
                for e in 0..count {
                    geo.im2col(x.example(e), &mut col);
                    let ye = y.example_mut(e);
                    for (o, chunk) in ye.chunks_mut(geo.out_len()).enumerate() {
                        chunk.fill(bias[o]);
                    }
                    gemm(
                        1.0,
                        weights,
                        View::row_major(cout, ckk),
                        &col,
                        View::row_major(ckk, geo.out_len()),
                        1.0,
                        ye,
                    );
                }
                self.record(|| Cache::Input(x));
                y
            }
            Op::BatchNorm { eps, scale, shift, slot } => {
                let c = node.input.channels();
                let s = node.input.spatial();
                let gamma = &self.params[scale..scale + c];
                let beta = &self.params[shift..shift + c];
                let (mean, var_biased) = match self.mode {
                    Mode::Train => channel_moments(&x, c, s),
                    Mode::Eval => {
                        let run = &self.stats.layers[slot];
                        (run.mean.clone(), run.var.clone())
                    }
                };
                let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                if self.mode == Mode::Train {
                    let m = (count * s) as f64;
                    let unbiased = if m > 1.0 {
                        var_biased.iter().map(|v| v * m / (m - 1.0)).collect()
                    } else {
                        var_biased.clone()
                    };
                    self.batch_stats[slot] = BnRunning { mean: mean.clone(), var: unbiased };
                }
                let mut xhat = x.data;
                let mut y = vec![0.0; xhat.len()];
                for e in 0..count {
                    for ch in 0..c {
                        let base = e * c * s + ch * s;
                        for i in base..base + s {
                            xhat[i] = (xhat[i] - mean[ch]) * inv_std[ch];
                            y[i] = gamma[ch] * xhat[i] + beta[ch];
                        }
                    }
                }
                let train = self.mode == Mode::Train;
                self.record(|| Cache::BatchNorm { xhat, inv_std, train });
                Tensor { shape: node.output, count, data: y }
            }
            Op::MaxPool { window } => {
                let (c, h, wd) = image_dims(node.input);
                let (oh, ow) = (h / window, wd / window);
                let mut y = Tensor::zeros(node.output, count);
                let mut arg = vec![0usize; y.data.len()];
                for e in 0..count {
                    let xe = x.example(e);
                    let base_out = e * c * oh * ow;
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = usize::MAX;
                                let mut bv = f64::NEG_INFINITY;
                                for dy in 0..window {
                                    for dx in 0..window {
                                        let idx = ch * h * wd + (oy * window + dy) * wd + ox * window + dx;
                                        if best == usize::MAX || xe[idx] > bv {
                                            bv = xe[idx];
                                            best = idx;
                                        }
                                    }
                                }
                                let o = base_out + ch * oh * ow + oy * ow + ox;
                                y.data[o] = bv;
                                arg[o] = best;
                            }
                        }
                    }
                }
                self.record(|| Cache::Pool { argmax: arg });
                y
            }
            Op::Flatten => {
                self.record(|| Cache::Empty);
                Tensor { shape: node.output, count, data: x.data }
            }
            Op::Residual { ref nodes, skip } => {
                let inner = self.run(nodes, x.clone());
                if skip {
                    let mut y = inner;
                    crate::linalg::axpy(1.0, &x.data, &mut y.data);
                    y
                } else {
                    inner
                }
            }
        }
    }
}

fn image_dims(shape: Shape) -> (usize, usize, usize) {
    match shape {
        Shape::Image { channels, height, width } => (channels, height, width),
        Shape::Flat { .. } => unreachable!("validated image shape"),
    }
}

/// Per-channel mean and biased variance.
fn channel_moments(x: &Tensor, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (x.count * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for e in 0..x.count {
        for ch in 0..c {
            let base = e * c * s + ch * s;
            mean[ch] += x.data[base..base + s].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for e in 0..x.count {
        for ch in 0..c {
            let base = e * c * s + ch * s;
            var[ch] += x.data[base..base + s]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: Shape, output: Shape, k: usize, stride: usize, pad: usize) -> Self {
        let (c, h, w) = image_dims(input);
        let (_, oh, ow) = image_dims(output);
        Self { c, h, w, oh, ow, k, stride, pad }
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Position of tap `(a, b)` for output `(oy, ox)` in the input plane.
    #[inline]
    fn source(&self, oy: usize, ox: usize, a: usize, b: usize) -> Option<usize> {
        let y = (oy * self.stride + a) as isize - self.pad as isize;
        let x = (ox * self.stride + b) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let ol = self.out_len();
        let plane = self.h * self.w;
        for ch in 0..self.c {
            for a in 0..self.k {
                for b in 0..self.k {
                    let row = (ch * self.k + a) * self.k + b;
                    let dst = &mut col[row * ol..(row + 1) * ol];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match self.source(oy, ox, a, b) {
                                Some(i) => x[ch * plane + i],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let ol = self.out_len();
        let plane = self.h * self.w;
        for ch in 0..self.c {
            for a in 0..self.k {
                for b in 0..self.k {
                    let row = (ch * self.k + a) * self.k + b;
                    let src = &col[row * ol..(row + 1) * ol];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(i) = self.source(oy, ox, a, b) {
                                dx[ch * plane + i] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn backward_node(node: &Node, params: &[f64], cache: &Cache, grad: Tensor, gp: &mut [f64]) -> Tensor {
    let count = grad.count;
    match (&node.op, cache) {
        (&Op::Dense { input, output, w, b }, Cache::Input(x)) => {
            gemm(
                1.0,
                &grad.data,
                View::transposed(count, output),
                &x.data,
                View::row_major(count, input),
                1.0,
                &mut gp[w..w + input * output],
            );
            for r in 0..count {
                for (gb, g) in gp[b..b + output].iter_mut().zip(grad.example(r)) {
                    *gb += g;
                }
            }
            let mut dx = Tensor::zeros(node.input, count);
            gemm(
                1.0,
                &grad.data,
                View::row_major(count, output),
                &params[w..w + input * output],
                View::row_major(output, input),
                0.0,
                &mut dx.data,
            );
            dx
        }
        (Op::Relu, Cache::PreActivation(x)) => {
            let mut dx = grad;
            for (g, &v) in dx.data.iter_mut().zip(&x.data) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
            dx.shape = node.input;
            dx
        }
        (&Op::Conv { cin, cout, k, stride, pad, w, b }, Cache::Input(x)) => {
            let geo = ConvGeom::new(node.input, node.output, k, stride, pad);
            let ckk = cin * k * k;
            let ol = geo.out_len();
            let weights = &params[w..w + cout * ckk];
            let mut col = vec![0.0; ckk * ol];
            let mut dcol = vec![0.0; ckk * ol];
            let mut dx = Tensor::zeros(node.input, count);
            for e in 0..count {
                let ge = grad.example(e);
                geo.im2col(x.example(e), &mut col);
                gemm(
                    1.0,
                    ge,
                    View::row_major(cout, ol),
                    &col,
                    View::transposed(ckk, ol),
                    1.0,
                    &mut gp[w..w + cout * ckk],
                );
                for o in 0..cout {
                    gp[b + o] += ge[o * ol..(o + 1) * ol].iter().sum::<f64>();
                }
                gemm(
                    1.0,
                    weights,
                    View::transposed(cout, ckk),
                    ge,
                    View::row_major(cout, ol),
                    0.0,
                    &mut dcol,
                );
                geo.col2im(&dcol, dx.example_mut(e));
            }
            dx
        }
        (&Op::BatchNorm { scale, shift, .. }, Cache::BatchNorm { xhat, inv_std, train }) => {
            let c = node.input.channels();
            let s = node.input.spatial();
            let gamma = &params[scale..scale + c];
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for e in 0..count {
                for ch in 0..c {
                    let base = e * c * s + ch * s;
                    for i in base..base + s {
                        sum_dy[ch] += grad.data[i];
                        sum_dy_xhat[ch] += grad.data[i] * xhat[i];
                    }
                }
            }
            for ch in 0..c {
                gp[scale + ch] += sum_dy_xhat[ch];
                gp[shift + ch] += sum_dy[ch];
            }
            let m = (count * s) as f64;
            let mut dx = grad;
            for e in 0..count {
                for ch in 0..c {
                    let base = e * c * s + ch * s;
                    let g = gamma[ch];
                    for i in base..base + s {
                        dx.data[i] = if *train {
                            // dxhat = dy * gamma; sums of dxhat are gamma times sums of dy
                            g * inv_std[ch] / m
                                * (m * dx.data[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                        } else {
                            g * inv_std[ch] * dx.data[i]
                        };
                    }
                }
            }
            dx
        }
        (Op::MaxPool { .. }, Cache::Pool { argmax }) => {
            let mut dx = Tensor::zeros(node.input, count);
            let in_len = node.input.size();
            let out_len = node.output.size();
            for e in 0..count {
                for j in 0..out_len {
                    let o = e * out_len + j;
                    dx.data[e * in_len + argmax[o]] += grad.data[o];
                }
            }
            dx
        }
        (Op::Flatten, Cache::Empty) => Tensor { shape: node.input, count, data: grad.data },
        _ => unreachable!("tape out of sync with network at layer {}", node.layer),
    }
}
