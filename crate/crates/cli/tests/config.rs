use probe_cli::config::{apply_override, canonical_json, content_hash, Command, ExperimentConfig};
use serde_json::{json, Value};

fn norm_bias_config() -> Value {
    json!({
        "seed": 3,
        "data": { "source": "synthetic", "classes": 3, "dim": 4, "per_class": 20, "separation": 4.0, "seed": 1 },
        "model": { "kind": "mlp", "hidden": [8] },
        "norm_bias": {
            "train": { "epochs": 2, "batch_size": 8, "schedule": { "kind": "constant", "lr": 0.05 } },
            "weight_decay": 0.001,
            "coefficient": 0.001
        }
    })
}

/// Rebuilds every object with its keys in reverse order.
fn reversed(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut entries: Vec<(&String, &Value)> = m.iter().collect();
            entries.reverse();
            Value::Object(entries.into_iter().map(|(k, v)| (k.clone(), reversed(v))).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(reversed).collect()),
        other => other.clone(),
    }
}

#[test]
fn key_order_does_not_change_the_hash() {
    let raw = norm_bias_config();
    let a = ExperimentConfig::from_value(Command::NormBias, &raw).unwrap();
    let b = ExperimentConfig::from_value(Command::NormBias, &reversed(&raw)).unwrap();
    assert_eq!(a.hash(), b.hash());
    let text_a = r#"{"b": 1, "a": {"y": [1, {"q": 2, "p": 3}], "x": null}}"#;
    let text_b = r#"{"a": {"x": null, "y": [1, {"p": 3, "q": 2}]}, "b": 1}"#;
    let (va, vb): (Value, Value) = (serde_json::from_str(text_a).unwrap(), serde_json::from_str(text_b).unwrap());
    assert_eq!(canonical_json(&va), r#"{"a":{"x":null,"y":[1,{"p":3,"q":2}]},"b":1}"#);
    assert_eq!(content_hash(&va), content_hash(&vb));
}

#[test]
fn explicit_defaults_hash_like_omitted_ones() {
    let raw = norm_bias_config();
    let mut explicit = raw.clone();
    explicit["command"] = json!("norm-bias");
    explicit["norm_bias"]["slack"] = json!(1.0);
    explicit["norm_bias"]["train"]["momentum"] = json!(0.9);
    explicit["data"]["clusters_per_class"] = json!(1);
    let a = ExperimentConfig::from_value(Command::NormBias, &raw).unwrap();
    let b = ExperimentConfig::from_value(Command::NormBias, &explicit).unwrap();
    assert_eq!(a.hash(), b.hash());
    let mut changed = raw.clone();
    changed["seed"] = json!(4);
    assert_ne!(a.hash(), ExperimentConfig::from_value(Command::NormBias, &changed).unwrap().hash());
}

#[test]
fn hash_is_hex_sha256() {
    let h = content_hash(&json!({}));
    assert_eq!(h.len(), 64);
    assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn validation_reports_every_problem() {
    let mut raw = norm_bias_config();
    raw["data"]["classes"] = json!(1);
    raw["norm_bias"]["slack"] = json!(0.5);
    raw["norm_bias"]["weight_decay"] = json!(-1.0);
    raw["norm_bias"]["train"]["batch_size"] = json!(0);
    raw["norm_bias"]["train"]["momentum"] = json!(1.5);
    raw["norm_bias"]["train"]["epochz"] = json!(3);
    raw["sweep"] = json!({});
    let errs = ExperimentConfig::from_value(Command::NormBias, &raw).unwrap_err();
    let has = |needle: &str| errs.iter().any(|e| e.contains(needle));
    for needle in [
        "data.classes",
        "norm_bias.slack",
        "norm_bias.weight_decay",
        "batch_size",
        "momentum",
        "norm_bias.train.epochz: unknown field",
        "sweep: unexpected key",
    ] {
        assert!(has(needle), "missing `{needle}` in {errs:#?}");
    }
}

#[test]
fn type_errors_in_separate_sections_are_all_reported() {
    let raw = json!({ "seed": "x", "data": { "source": "nowhere" }, "model": 5 });
    let errs = ExperimentConfig::from_value(Command::Attack, &raw).unwrap_err();
    for key in ["seed:", "data:", "model:", "attack: missing"] {
        assert!(errs.iter().any(|e| e.starts_with(key)), "missing `{key}` in {errs:#?}");
    }
}

#[test]
fn model_must_fit_the_data() {
    let mut raw = norm_bias_config();
    raw["model"] = json!({ "kind": "family", "family": { "kind": "convnet6" }, "width": 4 });
    let errs = ExperimentConfig::from_value(Command::NormBias, &raw).unwrap_err();
    assert!(errs.iter().any(|e| e.starts_with("model:")), "{errs:?}");
}

#[test]
fn command_mismatch_is_rejected() {
    let mut raw = norm_bias_config();
    raw["command"] = json!("rank");
    let errs = ExperimentConfig::from_value(Command::NormBias, &raw).unwrap_err();
    assert!(errs.iter().any(|e| e.starts_with("command:")));
}

#[test]
fn missing_cifar_directory_is_a_validation_error() {
    let mut raw = norm_bias_config();
    raw["data"] = json!({ "source": "cifar10", "dir": "/definitely/not/here" });
    let errs = ExperimentConfig::from_value(Command::NormBias, &raw).unwrap_err();
    assert!(errs.iter().filter(|e| e.contains("missing /definitely/not/here")).count() == 6, "{errs:?}");
}

#[test]
fn overrides_set_nested_values() {
    let mut v = norm_bias_config();
    apply_override(&mut v, "norm_bias.train.epochs=7").unwrap();
    apply_override(&mut v, "model.hidden.0=16").unwrap();
    apply_override(&mut v, "norm_bias.train.schedule={\"kind\":\"named\",\"name\":\"finetune\"}").unwrap();
    apply_override(&mut v, "data.note=plain text").unwrap();
    apply_override(&mut v, "extra.deep.key=true").unwrap();
    assert_eq!(v["norm_bias"]["train"]["epochs"], json!(7));
    assert_eq!(v["model"]["hidden"], json!([16]));
    assert_eq!(v["norm_bias"]["train"]["schedule"]["name"], json!("finetune"));
    assert_eq!(v["data"]["note"], json!("plain text"));
    assert_eq!(v["extra"]["deep"]["key"], json!(true));
}

#[test]
fn bad_overrides_are_rejected() {
    let mut v = norm_bias_config();
    assert!(apply_override(&mut v, "no-equals-sign").is_err());
    assert!(apply_override(&mut v, "=1").is_err());
    assert!(apply_override(&mut v, "model.hidden.5=1").is_err());
    assert!(apply_override(&mut v, "model.hidden.x=1").is_err());
    assert!(apply_override(&mut v, "seed.inner=1").is_err());
}

#[test]
fn shipped_configs_validate() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for cmd in [Command::LocalMinima, Command::NormBias, Command::NtkSweep, Command::Rank, Command::Attack] {
        let path = dir.join(format!("{}.json", cmd.as_str()));
        let raw: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        ExperimentConfig::from_value(cmd, &raw).unwrap_or_else(|e| panic!("{}: {e:?}", path.display()));
        seen += 1;
    }
    assert_eq!(seen, 5);
}
