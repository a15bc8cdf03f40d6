//! Experiment orchestration: one function per command plus the shared
//! record/artifact plumbing.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use probe_core::data::{load_cifar10, synth_dataset, Dataset};
use probe_core::landscape::{trapping_experiment, TrapConfig};
use probe_core::net::{InitScheme, Mode, Network};
use probe_core::ntk::{sweep_csv, width_sweep, SweepConfig, SweepRow, SWEEP_HEADER};
use probe_core::rank::{layer_spectra, rank_finetune, spectrum_csv, SPECTRUM_HEADER};
use probe_core::train::{robust_accuracy, trace_csv, train, EvalSpec, Model, Regularizer, TrainConfig};
use probe_core::{ProbeError, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{
    apply_override, content_hash, AttackRunConfig, Body, Command, DataConfig, ExperimentConfig, NormBiasConfig,
    RankConfig,
};
use crate::record::{
    append_csv, append_record, completed, now_unix, write_atomic, ErrorInfo, RunRecord, Status, RECORD_SCHEMA,
};

/// One command-line invocation.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    pub config: Value,
    pub config_file: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub overrides: Vec<String>,
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub config_hash: String,
    /// A completed record with the same hash already existed.
    pub skipped: bool,
    pub metrics: Value,
    pub artifacts: Vec<String>,
}

/// Exit code plus the error record that was emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub code: i32,
    pub config_hash: String,
    pub error: ErrorInfo,
}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

struct Report {
    metrics: Value,
    artifacts: Vec<String>,
    warnings: Vec<String>,
    /// Sweep cells that failed; the run is reported as an error when non-empty.
    failed_cells: Vec<String>,
}

impl Report {
    fn new(metrics: Value, artifacts: Vec<String>) -> Self {
        Self { metrics, artifacts, warnings: Vec::new(), failed_cells: Vec::new() }
    }
}

struct Ctx<'a> {
    inv: &'a Invocation,
    cfg: &'a ExperimentConfig,
    resolved: Value,
    hash: String,
}

impl Ctx<'_> {
    fn artifact(&self, name: &str, ext: &str) -> (String, PathBuf) {
        let file = format!("{}-{}-{name}.{ext}", self.cfg.command, &self.hash[..12]);
        let path = self.inv.out.join(&file);
        (file, path)
    }

    fn record(&self, hash: &str, config: Value, cell: Option<Value>, started: f64, body: RecordBody) -> RunRecord {
        RunRecord {
            schema: RECORD_SCHEMA,
            command: self.cfg.command.as_str().into(),
            status: if body.error.is_none() { Status::Ok } else { Status::Error },
            config_hash: hash.into(),
            config,
            overrides: self.inv.overrides.clone(),
            config_file: self.inv.config_file.as_ref().map(|p| p.display().to_string()),
            cell,
            started_unix: started,
            finished_unix: now_unix(),
            metrics: body.metrics,
            artifacts: body.artifacts,
            warnings: body.warnings,
            error: body.error,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

struct RecordBody {
    metrics: Value,
    artifacts: Vec<String>,
    warnings: Vec<String>,
    error: Option<ErrorInfo>,
}

pub fn error_kind(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<ProbeError>() {
        Some(ProbeError::Shape { .. }) => "shape",
        Some(ProbeError::Numeric(_)) => "numeric",
        Some(ProbeError::Argument(_)) => "argument",
        Some(ProbeError::Capacity(_)) => "capacity",
        Some(ProbeError::UndefinedMetric(_)) => "undefined-metric",
        Some(ProbeError::Refused(_)) => "refused",
        Some(ProbeError::Format { .. }) => "format",
        Some(ProbeError::Corrupt { .. }) => "corrupt",
        Some(ProbeError::Config(_)) => "config",
        Some(ProbeError::Io(_)) => "io",
        None if err.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "runtime",
    }
}

fn fail(inv: &Invocation, hash: String, config: Value, code: i32, error: ErrorInfo, started: f64) -> RunFailure {
    let record = RunRecord {
        schema: RECORD_SCHEMA,
        command: inv.command.as_str().into(),
        status: Status::Error,
        config_hash: hash.clone(),
        config,
        overrides: inv.overrides.clone(),
        config_file: inv.config_file.as_ref().map(|p| p.display().to_string()),
        cell: None,
        started_unix: started,
        finished_unix: now_unix(),
        metrics: Value::Null,
        artifacts: Vec::new(),
        warnings: Vec::new(),
        error: Some(error.clone()),
        tool_version: env!("CARGO_PKG_VERSION").into(),
    };
    let mut error = error;
    if let Err(e) = append_record(&inv.out, &record) {
        error.messages.push(format!("could not write run record: {e}"));
    }
    RunFailure { code, config_hash: hash, error }
}

/// Resolves overrides, validates, runs the command and appends run records.
pub fn execute(inv: &Invocation) -> Result<Outcome, RunFailure> {
    let started = now_unix();
    let mut raw = inv.config.clone();
    let mut errs = Vec::new();
    for o in &inv.overrides {
        if let Err(e) = apply_override(&mut raw, o) {
            errs.push(e);
        }
    }
    if let Some(seed) = inv.seed {
        if let Err(e) = apply_override(&mut raw, &format!("seed={seed}")) {
            errs.push(e);
        }
    }
    let parsed = if errs.is_empty() { ExperimentConfig::from_value(inv.command, &raw) } else { Err(errs) };
    let cfg = match parsed {
        Ok(cfg) => cfg,
        Err(messages) => {
            let info = ErrorInfo { kind: "config".into(), messages };
            return Err(fail(inv, content_hash(&raw), raw, EXIT_CONFIG, info, started));
        }
    };
    let resolved = cfg.resolved();
    let hash = content_hash(&resolved);
    let ctx = Ctx { inv, cfg: &cfg, resolved: resolved.clone(), hash: hash.clone() };

    let done = completed(&inv.out).map_err(|e| {
        let info = ErrorInfo { kind: "io".into(), messages: vec![format!("reading run records: {e}")] };
        fail(inv, hash.clone(), resolved.clone(), EXIT_RUNTIME, info, started)
    })?;
    if inv.resume && cfg.command != Command::NtkSweep {
        if let Some(prev) = done.get(&hash) {
            return Ok(Outcome {
                config_hash: hash,
                skipped: true,
                metrics: prev.metrics.clone(),
                artifacts: prev.artifacts.clone(),
            });
        }
    }

    let result = load_data(&cfg.data, cfg.seed).and_then(|data| match &cfg.body {
        Body::LocalMinima(t) => local_minima(&ctx, t, &data),
        Body::NormBias(c) => norm_bias(&ctx, c, &data),
        Body::NtkSweep(s) => ntk_sweep(&ctx, s, &data, inv.resume.then_some(&done)),
        Body::Rank(r) => rank(&ctx, r, &data),
        Body::Attack(a) => attack(&ctx, a, &data),
    });
    match result {
        Ok(report) => {
            let error = (!report.failed_cells.is_empty()).then(|| ErrorInfo {
                kind: "sweep-cells-failed".into(),
                messages: report.failed_cells.clone(),
            });
            let body = RecordBody {
                metrics: report.metrics.clone(),
                artifacts: report.artifacts.clone(),
                warnings: report.warnings,
                error: error.clone(),
            };
            let record = ctx.record(&hash, resolved.clone(), None, started, body);
            append_record(&inv.out, &record).map_err(|e| {
                let info = ErrorInfo { kind: "io".into(), messages: vec![format!("writing run record: {e}")] };
                RunFailure { code: EXIT_RUNTIME, config_hash: hash.clone(), error: info }
            })?;
            match error {
                Some(error) => Err(RunFailure { code: EXIT_RUNTIME, config_hash: hash, error }),
                None => Ok(Outcome { config_hash: hash, skipped: false, metrics: report.metrics, artifacts: report.artifacts }),
            }
        }
        Err(e) => {
            let info = ErrorInfo { kind: error_kind(&e).into(), messages: vec![format!("{e:#}")] };
            Err(fail(inv, hash, resolved, EXIT_RUNTIME, info, started))
        }
    }
}

pub fn load_data(cfg: &DataConfig, seed: u64) -> anyhow::Result<Dataset> {
    match cfg {
        DataConfig::Synthetic(s) => Ok(synth_dataset(s)?),
        DataConfig::Cifar10(c) => {
            let dir = c.resolved_dir().ok_or_else(|| anyhow!("no CIFAR-10 directory configured"))?;
            let mut data = load_cifar10(&dir).with_context(|| format!("loading CIFAR-10 from {}", dir.display()))?;
            if let Some(n) = c.train_limit {
                data = data.subsample_train(n, seed);
            }
            if let Some(n) = c.test_limit {
                data.test = data.test.select(&(0..n.min(data.test.len())).collect::<Vec<_>>());
            }
            data = data.normalized(c.normalization);
            if c.flatten {
                let flat = Shape::flat(data.shape().size());
                data = data.reshape(flat)?;
            }
            Ok(data)
        }
    }
}

fn network(ctx: &Ctx) -> anyhow::Result<Network> {
    let spec = ctx.cfg.network_spec().map_err(|e| anyhow!("model: {e}"))?;
    Ok(Network::new(spec)?)
}

fn opt_csv(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn local_minima(ctx: &Ctx, trap: &TrapConfig, data: &Dataset) -> anyhow::Result<Report> {
    let net = network(ctx)?;
    let res = trapping_experiment(&net, &data.train, trap)?;
    let stats = net.fresh_stats();
    let test_loss = net.loss(&res.params.values, &stats, &data.test, Mode::Eval)?;
    let test_acc = net.accuracy(&res.params.values, &stats, &data.test)?;

    let mut csv = String::from("epoch,lr,loss,grad_norm,min_activation\n");
    for r in &res.trace {
        csv.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.lr, r.loss, r.grad_norm, opt_csv(r.min_activation)));
    }
    let (trace_file, trace_path) = ctx.artifact("trace", "csv");
    write_atomic(&trace_path, &csv)?;
    let reports = json!({ "before": res.before, "after": res.after });
    let (report_file, report_path) = ctx.artifact("reports", "json");
    write_atomic(&report_path, &serde_json::to_string_pretty(&reports)?)?;

    let metrics = json!({
        "param_count": net.param_count(),
        "before": res.before,
        "after": res.after,
        "linear_loss": res.linear_loss,
        "linear_converged": res.linear_converged,
        "loss_ratio": res.after.loss / res.linear_loss,
        "stayed_positive": res.stayed_positive,
        "trapped": res.trapped,
        "test_loss": test_loss,
        "test_acc": test_acc,
    });
    Ok(Report::new(metrics, vec![trace_file, report_file]))
}

fn summary(net: &Network, model: &Model, data: &Dataset) -> anyhow::Result<Value> {
    let p = &model.params.values;
    Ok(json!({
        "train_loss": net.loss(p, &model.stats, &data.train, Mode::Eval)?,
        "test_acc": net.accuracy(p, &model.stats, &data.test)?,
        "param_norm_sq": p.iter().map(|v| v * v).sum::<f64>(),
    }))
}

fn norm_bias(ctx: &Ctx, c: &NormBiasConfig, data: &Dataset) -> anyhow::Result<Report> {
    let net = network(ctx)?;
    let init = net.init(InitScheme::HeUniform { seed: ctx.cfg.seed });
    let eval = EvalSpec { test: Some(&data.test), ..Default::default() };

    let wd_cfg = TrainConfig { regularizer: Regularizer::WeightDecay { lambda: c.weight_decay }, ..c.train.clone() };
    let mut wd = Model::new(&net, init.clone());
    let wd_trace = train(&net, &mut wd, &data.train, &wd_cfg, &eval, |_, _| Ok(()))?;
    let mu_sq = probe_core::train::mu_heuristic(&wd.params.values, c.slack)?;

    let nb_reg = Regularizer::NormBias { coefficient: c.coefficient, mu_sq };
    let nb_cfg = TrainConfig { regularizer: nb_reg, ..c.train.clone() };
    let mut nb = Model::new(&net, init);
    let nb_trace = train(&net, &mut nb, &data.train, &nb_cfg, &eval, |_, _| Ok(()))?;

    let mut csv = String::new();
    for (run, trace) in [("weight_decay", &wd_trace), ("norm_bias", &nb_trace)] {
        let body = trace_csv(trace);
        let mut lines = body.lines();
        if csv.is_empty() {
            csv.push_str(&format!("run,{}\n", lines.next().unwrap_or_default()));
        } else {
            lines.next();
        }
        for l in lines {
            csv.push_str(&format!("{run},{l}\n"));
        }
    }
    let (file, path) = ctx.artifact("trace", "csv");
    write_atomic(&path, &csv)?;
    let metrics = json!({
        "param_count": net.param_count(),
        "mu_sq": mu_sq,
        "weight_decay": summary(&net, &wd, data)?,
        "norm_bias": summary(&net, &nb, data)?,
    });
    Ok(Report::new(metrics, vec![file]))
}

fn attack(ctx: &Ctx, a: &AttackRunConfig, data: &Dataset) -> anyhow::Result<Report> {
    let net = network(ctx)?;
    let mut model = Model::new(&net, net.init(InitScheme::HeUniform { seed: ctx.cfg.seed }));
    let eval = EvalSpec { test: Some(&data.test), ..Default::default() };
    let trace = train(&net, &mut model, &data.train, &a.train, &eval, |_, _| Ok(()))?;
    let limit = a.limit.unwrap_or(data.test.len()).min(data.test.len());
    let subset = data.test.select(&(0..limit).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed ^ 0xA77A_C4);
    let robust = robust_accuracy(&net, &model.params.values, &model.stats, &subset, &a.eval, 256, &mut rng)?;
    let clean = net.accuracy(&model.params.values, &model.stats, &subset)?;

    let (file, path) = ctx.artifact("trace", "csv");
    write_atomic(&path, &trace_csv(&trace))?;
    let metrics = json!({
        "param_count": net.param_count(),
        "adversarial_training": a.train.attack.is_some(),
        "attacked": limit,
        "clean_acc": clean,
        "robust_acc": robust,
        "final": summary(&net, &model, data)?,
    });
    Ok(Report::new(metrics, vec![file]))
}

fn ranks(spectra: &[probe_core::rank::SingularSpectrum]) -> Value {
    spectra.iter().map(|s| json!({ "layer": s.layer, "effective_rank": s.effective_rank })).collect()
}

fn rank(ctx: &Ctx, r: &RankConfig, data: &Dataset) -> anyhow::Result<Report> {
    let net = network(ctx)?;
    let mut model = Model::new(&net, net.init(InitScheme::HeUniform { seed: ctx.cfg.seed }));
    let init_spectra = layer_spectra(&net, &model.params.values)?;
    let mut artifacts = Vec::new();
    if let Some(pre) = &r.pretrain {
        let eval = EvalSpec { test: Some(&data.test), ..Default::default() };
        let trace = train(&net, &mut model, &data.train, pre, &eval, |_, _| Ok(()))?;
        let (file, path) = ctx.artifact("pretrain", "csv");
        write_atomic(&path, &trace_csv(&trace))?;
        artifacts.push(file);
    }
    let start_spectra = layer_spectra(&net, &model.params.values)?;
    let res = rank_finetune(&net, &mut model, &data.train, &data.test, &r.finetune)?;

    let mut csv = format!("phase,{SPECTRUM_HEADER}\n");
    for s in &init_spectra {
        let (top, bottom) = (s.values[0], s.values[s.values.len() - 1]);
        csv.push_str(&format!("init,0,{},{},{top},{bottom}\n", s.layer, s.effective_rank));
    }
    for l in spectrum_csv(&res.trace).lines().skip(1) {
        csv.push_str(&format!("finetune,{l}\n"));
    }
    let (file, path) = ctx.artifact("spectrum", "csv");
    write_atomic(&path, &csv)?;
    artifacts.push(file);

    let final_ranks: Vec<Value> =
        res.final_ranks().iter().map(|(l, r)| json!({ "layer": l, "effective_rank": r })).collect();
    let metrics = json!({
        "param_count": net.param_count(),
        "mode": r.finetune.mode,
        "init_ranks": ranks(&init_spectra),
        "start_ranks": ranks(&start_spectra),
        "final_ranks": final_ranks,
        "losses": res.losses,
        "clean_acc": res.clean_acc,
        "robust_acc": res.robust_acc,
    });
    let mut report = Report::new(metrics, artifacts);
    report.warnings = res.warnings;
    Ok(report)
}

/// Sweep config restricted to one `(width, seed)` cell.
fn cell_config(s: &SweepConfig, width: usize, seed: u64) -> SweepConfig {
    SweepConfig { widths: vec![width], seeds: vec![seed], ..s.clone() }
}

fn with_sweep(resolved: &Value, sweep: &SweepConfig) -> Value {
    let mut v = resolved.clone();
    v["sweep"] = serde_json::to_value(sweep).expect("sweep config serializes");
    v
}

fn ntk_sweep(
    ctx: &Ctx,
    s: &SweepConfig,
    data: &Dataset,
    done: Option<&HashMap<String, RunRecord>>,
) -> anyhow::Result<Report> {
    // Artifacts are keyed by the config minus its cell lists so extended sweeps append.
    let template = with_sweep(&ctx.resolved, &SweepConfig { widths: vec![], seeds: vec![], ..s.clone() });
    let stem = format!("ntk-sweep-{}", &content_hash(&template)[..12]);
    let (sweep_file, evo_file) = (format!("{stem}.csv"), format!("{stem}-evolution.csv"));
    let (sweep_path, evo_path) = (ctx.inv.out.join(&sweep_file), ctx.inv.out.join(&evo_file));
    std::fs::create_dir_all(&ctx.inv.out)?;

    let mut rows: Vec<SweepRow> = Vec::new();
    let mut image_ids = Vec::new();
    let (mut ran, mut skipped) = (0usize, 0usize);
    let mut failed = Vec::new();
    for &width in &s.widths {
        for &seed in &s.seeds {
            let cell = cell_config(s, width, seed);
            let cell_value = with_sweep(&ctx.resolved, &cell);
            let cell_hash = content_hash(&cell_value);
            if let Some(prev) = done.and_then(|d| d.get(&cell_hash)) {
                if let Some(row) = prev.metrics.get("row").and_then(|r| serde_json::from_value(r.clone()).ok()) {
                    rows.push(row);
                    skipped += 1;
                    continue;
                }
            }
            let cell_started = now_unix();
            let outcome = width_sweep(&cell, data)?;
            image_ids = outcome.image_ids.clone();
            let coords = json!({ "width": width, "seed": seed });
            let (metrics, error) = match (outcome.rows.first(), outcome.failures.first()) {
                (Some(row), _) => {
                    append_csv(&sweep_path, SWEEP_HEADER, sweep_csv(std::slice::from_ref(row)).split_once('\n').unwrap().1)?;
                    let mut evo = String::new();
                    for e in &outcome.evolution {
                        evo.push_str(&format!(
                            "{},{},{},{},{},{}\n",
                            e.family, e.width, e.seed, e.epoch, e.rel_change, e.correlation
                        ));
                    }
                    if !evo.is_empty() {
                        append_csv(&evo_path, "family,width,seed,epoch,rel_change,correlation", &evo)?;
                    }
                    rows.push(row.clone());
                    (json!({ "row": row, "image_ids": outcome.image_ids }), None)
                }
                (None, Some(f)) => {
                    failed.push(format!("width {} seed {}: {}", f.width, f.seed, f.error));
                    (Value::Null, Some(ErrorInfo { kind: "cell".into(), messages: vec![f.error.clone()] }))
                }
                (None, None) => return Err(anyhow!("sweep cell width {width} seed {seed} produced nothing")),
            };
            let artifacts = if error.is_none() { vec![sweep_file.clone(), evo_file.clone()] } else { vec![] };
            let body = RecordBody { metrics, artifacts, warnings: vec![], error };
            append_record(&ctx.inv.out, &ctx.record(&cell_hash, cell_value, Some(coords), cell_started, body))?;
            ran += 1;
        }
    }

    let mut by_width: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_width.entry(r.width).or_default().push(r.correlation);
    }
    let means: Vec<Value> = by_width
        .iter()
        .map(|(w, cs)| json!({ "width": w, "mean_correlation": cs.iter().sum::<f64>() / cs.len() as f64, "cells": cs.len() }))
        .collect();
    let metrics = json!({
        "family": s.family.label(),
        "cells_run": ran,
        "cells_resumed": skipped,
        "cells_failed": failed.len(),
        "mean_correlation": means,
        "image_ids": image_ids,
    });
    let mut report = Report::new(metrics, vec![sweep_file, evo_file]);
    report.failed_cells = failed;
    Ok(report)
}

/// Reads a config file as JSON.
pub fn read_config(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
