//! Experiment configs: parsing, overrides, validation and content hashing.

use std::fmt;
use std::path::PathBuf;

use clap::ValueEnum;
use probe_core::data::{cifar_shape, default_data_dir, Normalization, SynthConfig, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use probe_core::landscape::{Optimizer, TrapConfig};
use probe_core::net::{LayerSpec, Network, NetworkSpec};
use probe_core::ntk::{Family, SweepConfig};
use probe_core::rank::FinetuneConfig;
use probe_core::train::{AttackConfig, TrainConfig};
use probe_core::Shape;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    LocalMinima,
    NormBias,
    NtkSweep,
    Rank,
    Attack,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::LocalMinima => "local-minima",
            Command::NormBias => "norm-bias",
            Command::NtkSweep => "ntk-sweep",
            Command::Rank => "rank",
            Command::Attack => "attack",
        }
    }

    /// Config key holding the command's settings.
    pub fn section(self) -> &'static str {
        match self {
            Command::LocalMinima => "trap",
            Command::NormBias => "norm_bias",
            Command::NtkSweep => "sweep",
            Command::Rank => "rank",
            Command::Attack => "attack",
        }
    }

    fn needs_model(self) -> bool {
        self != Command::NtkSweep
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataConfig {
    Synthetic(SynthConfig),
    Cifar10(CifarConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CifarConfig {
    /// Directory with the binary batches; falls back to `PROBE_DATA_DIR`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub flatten: bool,
    #[serde(default)]
    pub normalization: Normalization,
}

impl CifarConfig {
    pub fn resolved_dir(&self) -> Option<PathBuf> {
        self.dir.clone().or_else(default_data_dir)
    }
}

impl DataConfig {
    pub fn input_shape(&self) -> Shape {
        match self {
            DataConfig::Synthetic(s) => s.image.unwrap_or(Shape::flat(s.dim)),
            DataConfig::Cifar10(c) if c.flatten => Shape::flat(cifar_shape().size()),
            DataConfig::Cifar10(_) => cifar_shape(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DataConfig::Synthetic(s) => s.classes,
            DataConfig::Cifar10(_) => 10,
        }
    }

    fn validate(&self, errs: &mut Vec<String>) {
        match self {
            DataConfig::Synthetic(s) => {
                if s.classes < 2 {
                    errs.push(format!("data.classes: need at least 2, got {}", s.classes));
                }
                if s.dim == 0 {
                    errs.push("data.dim: must be positive".into());
                }
                if s.per_class == 0 {
                    errs.push("data.per_class: must be positive".into());
                }
                if s.clusters_per_class == 0 {
                    errs.push("data.clusters_per_class: must be positive".into());
                }
                if !(s.noise >= 0.0) || !(s.separation >= 0.0) {
                    errs.push("data.noise and data.separation: must be >= 0".into());
                }
                if let Some(img) = s.image {
                    if img.size() != s.dim {
                        errs.push(format!("data.image: size {} does not match dim {}", img.size(), s.dim));
                    }
                }
            }
            DataConfig::Cifar10(c) => match c.resolved_dir() {
                None => errs.push("data.dir: not set and PROBE_DATA_DIR is unset".into()),
                Some(dir) => {
                    for f in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
                        if !dir.join(f).is_file() {
                            errs.push(format!("data.dir: missing {}", dir.join(f).display()));
                        }
                    }
                }
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    /// ReLU MLP with the given hidden widths; image inputs are flattened.
    Mlp { hidden: Vec<usize> },
    Family { family: Family, width: usize },
    Spec { spec: NetworkSpec },
}

impl ModelConfig {
    pub fn build(&self, input: Shape, classes: usize) -> Result<NetworkSpec, String> {
        let spec = match self {
            ModelConfig::Mlp { hidden } => {
                let mut spec = NetworkSpec::mlp(input.size(), hidden, classes);
                if matches!(input, Shape::Image { .. }) {
                    spec.input = input;
                    spec.layers.insert(0, LayerSpec::Flatten);
                }
                spec
            }
            ModelConfig::Family { family, width } => family.spec(input, *width, classes).map_err(|e| e.to_string())?,
            ModelConfig::Spec { spec } => {
                if spec.input != input || spec.classes != classes {
                    return Err(format!(
                        "spec expects input {:?} with {} classes, data provides {:?} with {}",
                        spec.input, spec.classes, input, classes
                    ));
                }
                spec.clone()
            }
        };
        Network::new(spec.clone()).map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

/// Train with weight decay, derive `μ²`, then retrain from the same
/// initialization with the norm-bias penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBiasConfig {
    /// Shared training settings; the regularizer field is ignored.
    pub train: TrainConfig,
    pub weight_decay: f64,
    pub coefficient: f64,
    #[serde(default = "unit")]
    pub slack: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankConfig {
    /// Training from initialization before fine-tuning; `None` fine-tunes the fresh model.
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRunConfig {
    /// Set `train.attack` for adversarial training.
    pub train: TrainConfig,
    pub eval: AttackConfig,
    /// Attack only the first this many test examples.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    LocalMinima(TrapConfig),
    NormBias(NormBiasConfig),
    NtkSweep(SweepConfig),
    Rank(RankConfig),
    Attack(AttackRunConfig),
}

impl Body {
    fn to_value(&self) -> Value {
        let v = match self {
            Body::LocalMinima(c) => serde_json::to_value(c),
            Body::NormBias(c) => serde_json::to_value(c),
            Body::NtkSweep(c) => serde_json::to_value(c),
            Body::Rank(c) => serde_json::to_value(c),
            Body::Attack(c) => serde_json::to_value(c),
        };
        v.expect("config sections serialize")
    }
}

/// A parsed, validated experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    /// Model initialization and data subsampling.
    pub seed: u64,
    pub data: DataConfig,
    pub model: Option<ModelConfig>,
    pub body: Body,
}

impl ExperimentConfig {
    /// Full config with every default filled in.
    pub fn resolved(&self) -> Value {
        let mut m = Map::new();
        m.insert("command".into(), Value::String(self.command.as_str().into()));
        m.insert("seed".into(), Value::from(self.seed));
        m.insert("data".into(), serde_json::to_value(&self.data).expect("data config serializes"));
        if let Some(model) = &self.model {
            m.insert("model".into(), serde_json::to_value(model).expect("model config serializes"));
        }
        m.insert(self.command.section().into(), self.body.to_value());
        Value::Object(m)
    }

    pub fn hash(&self) -> String {
        content_hash(&self.resolved())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, String> {
        let model = self.model.as_ref().ok_or("model: missing")?;
        model.build(self.data.input_shape(), self.data.classes())
    }

    /// Parses `raw` for `command`, reporting every problem found.
    pub fn from_value(command: Command, raw: &Value) -> Result<Self, Vec<String>> {
        let Some(obj) = raw.as_object() else {
            return Err(vec!["config must be a JSON object".into()]);
        };
        let mut errs = Vec::new();
        let section = command.section();
        for key in obj.keys() {
            if !["command", "seed", "data", "model", section].contains(&key.as_str()) {
                errs.push(format!("{key}: unexpected key for command {command}"));
            }
        }
        match obj.get("command") {
            None => {}
            Some(Value::String(s)) if s == command.as_str() => {}
            Some(other) => errs.push(format!("command: config is for {other}, invoked as {command}")),
        }
        let seed = match obj.get("seed") {
            None => Some(0),
            Some(v) => parse_section::<u64>("seed", v, &mut errs),
        };
        let data = required::<DataConfig>(obj, "data", &mut errs);
        let model = match obj.get("model") {
            None if command.needs_model() => {
                errs.push("model: missing".into());
                None
            }
            None => None,
            Some(v) => parse_section::<ModelConfig>("model", v, &mut errs),
        };
        let body = obj.get(section).map(|v| match command {
            Command::LocalMinima => parse_section(section, v, &mut errs).map(Body::LocalMinima),
            Command::NormBias => parse_section(section, v, &mut errs).map(Body::NormBias),
            Command::NtkSweep => parse_section(section, v, &mut errs).map(Body::NtkSweep),
            Command::Rank => parse_section(section, v, &mut errs).map(Body::Rank),
            Command::Attack => parse_section(section, v, &mut errs).map(Body::Attack),
        });
        if body.is_none() {
            errs.push(format!("{section}: missing"));
        }
        let (Some(seed), Some(data), Some(Some(body))) = (seed, data, body) else {
            return Err(errs);
        };
        let cfg = ExperimentConfig { command, seed, data, model, body };
        unknown_fields("", raw, &cfg.resolved(), &mut errs);
        cfg.validate(&mut errs);
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(errs)
        }
    }

    fn validate(&self, errs: &mut Vec<String>) {
        self.data.validate(errs);
        let input = self.data.input_shape();
        let classes = self.data.classes();
        let spec = match &self.model {
            Some(m) => match m.build(input, classes) {
                Ok(spec) => Some(spec),
                Err(e) => {
                    errs.push(format!("model: {e}"));
                    None
                }
            },
            None => None,
        };
        let train_errs = |prefix: &str, t: &TrainConfig, errs: &mut Vec<String>| {
            errs.extend(t.validate().into_iter().map(|e| format!("{prefix}: {e}")));
        };
        match &self.body {
            Body::LocalMinima(t) => {
                if let Err(e) = t.schedule.resolve() {
                    errs.push(format!("trap.schedule: {e}"));
                }
                match t.optimizer {
                    Optimizer::Sgd { batch_size: 0 } | Optimizer::SgdMomentum { batch_size: 0, .. } => {
                        errs.push("trap.optimizer.batch_size: must be positive".into())
                    }
                    _ => {}
                }
                if let Some(spec) = &spec {
                    if spec.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm { .. })) {
                        errs.push("model: local-minima runs need a network without batch norm".into());
                    }
                }
            }
            Body::NormBias(c) => {
                train_errs("norm_bias.train", &c.train, errs);
                if !(c.weight_decay >= 0.0) {
                    errs.push(format!("norm_bias.weight_decay: must be >= 0, got {}", c.weight_decay));
                }
                if !(c.coefficient >= 0.0) {
                    errs.push(format!("norm_bias.coefficient: must be >= 0, got {}", c.coefficient));
                }
                if !(c.slack >= 1.0) {
                    errs.push(format!("norm_bias.slack: must be >= 1, got {}", c.slack));
                }
            }
            Body::NtkSweep(s) => {
                train_errs("sweep.train", &s.train, errs);
                if s.widths.is_empty() {
                    errs.push("sweep.widths: empty".into());
                } else if !s.widths.windows(2).all(|w| w[0] < w[1]) {
                    errs.push("sweep.widths: must be strictly ascending".into());
                }
                if s.seeds.is_empty() {
                    errs.push("sweep.seeds: empty".into());
                }
                if s.samples < 2 {
                    errs.push(format!("sweep.samples: need at least 2, got {}", s.samples));
                }
                if let Some(&w) = s.widths.first() {
                    if let Err(e) = s.family.spec(input, w, classes) {
                        errs.push(format!("sweep.family: {e}"));
                    }
                }
            }
            Body::Rank(r) => {
                if let Some(p) = &r.pretrain {
                    train_errs("rank.pretrain", p, errs);
                }
                train_errs("rank.finetune.train", &r.finetune.train, errs);
                if !(0.0..=1.0).contains(&r.finetune.quantile) {
                    errs.push(format!("rank.finetune.quantile: must be in [0, 1], got {}", r.finetune.quantile));
                }
                if r.finetune.clip_epochs > r.finetune.epochs {
                    errs.push("rank.finetune.clip_epochs: exceeds epochs".into());
                }
            }
            Body::Attack(a) => {
                train_errs("attack.train", &a.train, errs);
                if let Err(e) = a.eval.validate() {
                    errs.push(format!("attack.eval: {e}"));
                }
                if a.limit == Some(0) {
                    errs.push("attack.limit: must be positive".into());
                }
            }
        }
    }
}

fn parse_section<T: DeserializeOwned>(path: &str, v: &Value, errs: &mut Vec<String>) -> Option<T> {
    match serde_json::from_value(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            errs.push(format!("{path}: {e}"));
            None
        }
    }
}

fn required<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, errs: &mut Vec<String>) -> Option<T> {
    match obj.get(key) {
        Some(v) => parse_section(key, v, errs),
        None => {
            errs.push(format!("{key}: missing"));
            None
        }
    }
}

/// Keys present in `raw` that did not survive the typed round trip.
fn unknown_fields(path: &str, raw: &Value, resolved: &Value, errs: &mut Vec<String>) {
    match (raw, resolved) {
        (Value::Object(r), Value::Object(s)) => {
            for (k, v) in r {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match s.get(k) {
                    Some(w) => unknown_fields(&sub, v, w, errs),
                    None => errs.push(format!("{sub}: unknown field")),
                }
            }
        }
        (Value::Array(r), Value::Array(s)) => {
            for (i, (v, w)) in r.iter().zip(s).enumerate() {
                unknown_fields(&format!("{path}.{i}"), v, w, errs);
            }
        }
        _ => {}
    }
}

/// Applies `key.path=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(cfg: &mut Value, spec: &str) -> Result<(), String> {
    let (path, text) = spec.split_once('=').ok_or_else(|| format!("override `{spec}`: expected key=value"))?;
    if path.is_empty() {
        return Err(format!("override `{spec}`: empty key"));
    }
    let value = serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()));
    let mut cur = cfg;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(m) => {
                if last {
                    m.insert(part.to_string(), value);
                    return Ok(());
                }
                m.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| format!("override `{spec}`: `{part}` is not an array index"))?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| format!("override `{spec}`: index {idx} out of range ({len})"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("override `{spec}`: `{part}` is inside a scalar")),
        };
    }
    unreachable!("path has at least one component")
}

/// Serializes with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push(':');
                write_canonical(&m[*k], out);
            }
            out.push('}');
        }
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(x, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// SHA-256 over `blob <len>\0<canonical json>`, hex encoded.
pub fn content_hash(v: &Value) -> String {
    let body = canonical_json(v);
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
