use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use probe_cli::config::content_hash;
use probe_cli::record::{read_records, RunRecord, Status};
use probe_core::data::{cifar_shape, encode_cifar_batch, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use probe_core::{Batch, Tensor};
use serde_json::{json, Value};

fn probe(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_probe"));
    cmd.args(args).env_remove("PROBE_DATA_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("probe runs")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    probe(&args, &[])
}

fn synthetic() -> Value {
    json!({ "source": "synthetic", "classes": 3, "dim": 4, "per_class": 20, "separation": 4.0, "seed": 1 })
}

fn train(epochs: usize) -> Value {
    json!({ "epochs": epochs, "batch_size": 8, "schedule": { "kind": "constant", "lr": 0.05 } })
}

fn norm_bias() -> Value {
    json!({
        "data": synthetic(),
        "model": { "kind": "mlp", "hidden": [8] },
        "norm_bias": { "train": train(2), "weight_decay": 0.001, "coefficient": 0.001 }
    })
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Every artifact listed in a record exists and every CSV row has the header's width.
fn check_artifacts(out: &Path, record: &RunRecord) {
    assert!(!record.artifacts.is_empty());
    for a in &record.artifacts {
        let text = fs::read_to_string(out.join(a)).unwrap();
        if a.ends_with(".csv") {
            let mut lines = text.lines();
            let cols = lines.next().unwrap().split(',').count();
            let mut n = 0;
            for l in lines {
                assert_eq!(l.split(',').count(), cols, "{a}: {l}");
                n += 1;
            }
            assert!(n > 0, "{a} has no rows");
        }
    }
}

#[test]
fn norm_bias_run_writes_record_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "nb.json", &norm_bias());
    let out = dir.path().join("out");
    let summary = stdout_json(&run("norm-bias", &cfg, &out, &["--seed", "5", "--override", "model.hidden.0=6"]));
    let records = read_records(&out).unwrap();
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert_eq!(r.status, Status::Ok);
    assert_eq!(r.command, "norm-bias");
    assert_eq!(r.config_hash, content_hash(&r.config));
    assert_eq!(summary["config_hash"], json!(r.config_hash));
    assert_eq!(r.config["seed"], json!(5));
    assert_eq!(r.config["model"]["hidden"], json!([6]));
    assert_eq!(r.config["norm_bias"]["slack"], json!(1.0));
    assert_eq!(r.overrides, vec!["model.hidden.0=6".to_string()]);
    assert!(r.finished_unix >= r.started_unix);
    assert!(r.metrics["mu_sq"].as_f64().unwrap() > 0.0);
    check_artifacts(&out, r);
    let csv = fs::read_to_string(out.join(&r.artifacts[0])).unwrap();
    assert!(csv.starts_with("run,epoch,lr,train_loss"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("norm_bias,")).count(), 2);
}

#[test]
fn identical_configs_reproduce_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "nb.json", &norm_bias());
    let out = dir.path().join("out");
    let a = stdout_json(&run("norm-bias", &cfg, &out, &[]));
    let b = stdout_json(&run("norm-bias", &cfg, &out, &[]));
    assert_eq!(a["metrics"], b["metrics"]);
    assert_eq!(read_records(&out).unwrap().len(), 2);
}

#[test]
fn resume_skips_completed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "nb.json", &norm_bias());
    let out = dir.path().join("out");
    stdout_json(&run("norm-bias", &cfg, &out, &[]));
    let again = stdout_json(&run("norm-bias", &cfg, &out, &["--resume"]));
    assert_eq!(again["status"], json!("skipped"));
    assert_eq!(read_records(&out).unwrap().len(), 1);
    let changed = stdout_json(&run("norm-bias", &cfg, &out, &["--resume", "--seed", "9"]));
    assert_eq!(changed["status"], json!("ok"));
    assert_eq!(read_records(&out).unwrap().len(), 2);
}

#[test]
fn invalid_config_exits_with_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = norm_bias();
    bad["norm_bias"]["slack"] = json!(0.1);
    bad["data"]["classes"] = json!(1);
    let cfg = write_config(dir.path(), "bad.json", &bad);
    let out = dir.path().join("out");
    let res = run("norm-bias", &cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["status"], json!("error"));
    assert_eq!(err["error"]["kind"], json!("config"));
    assert!(err["error"]["messages"].as_array().unwrap().len() >= 2);
    let records = read_records(&out).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].status, Status::Error);

    let missing = run("norm-bias", &dir.path().join("nope.json"), &out, &[]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_nonzero_with_kind() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = norm_bias();
    cfg["norm_bias"]["train"]["schedule"]["lr"] = json!(1e300);
    let path = write_config(dir.path(), "nb.json", &cfg);
    let out = dir.path().join("out");
    let res = run("norm-bias", &path, &out, &[]);
    assert_eq!(res.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"]["kind"], json!("numeric"));
    let records = read_records(&out).unwrap();
    assert_eq!(records[0].error.as_ref().unwrap().kind, "numeric");
}

fn sweep(widths: &[usize]) -> Value {
    json!({
        "data": synthetic(),
        "sweep": {
            "family": { "kind": "mlp2" },
            "widths": widths,
            "seeds": [1],
            "samples": 5,
            "train": train(2),
            "track_every": 1
        }
    })
}

#[test]
fn sweep_cells_resume_and_extend() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let first = write_config(dir.path(), "s1.json", &sweep(&[4, 8]));
    let a = stdout_json(&run("ntk-sweep", &first, &out, &[]));
    assert_eq!(a["metrics"]["cells_run"], json!(2));

    let second = write_config(dir.path(), "s2.json", &sweep(&[4, 8, 16]));
    let b = stdout_json(&run("ntk-sweep", &second, &out, &["--resume"]));
    assert_eq!(b["metrics"]["cells_run"], json!(1));
    assert_eq!(b["metrics"]["cells_resumed"], json!(2));
    assert_eq!(b["metrics"]["mean_correlation"].as_array().unwrap().len(), 3);
    assert_eq!(a["artifacts"], b["artifacts"]);

    let records = read_records(&out).unwrap();
    let cells: Vec<&RunRecord> = records.iter().filter(|r| r.cell.is_some()).collect();
    assert_eq!(cells.len(), 3);
    for c in &cells {
        assert_eq!(c.config_hash, content_hash(&c.config));
        assert_eq!(c.config["sweep"]["widths"].as_array().unwrap().len(), 1);
    }
    let summary = records.last().unwrap();
    check_artifacts(&out, summary);
    let csv = fs::read_to_string(out.join(summary.artifacts[0].as_str())).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("family,width,P,seed"));
}

#[test]
fn failed_sweep_cells_are_recorded_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut cfg = sweep(&[4, 8]);
    cfg["sweep"]["train"]["schedule"]["lr"] = json!(1e300);
    let path = write_config(dir.path(), "s.json", &cfg);
    let res = run("ntk-sweep", &path, &out, &[]);
    assert_eq!(res.status.code(), Some(1));
    let records = read_records(&out).unwrap();
    assert_eq!(records.iter().filter(|r| r.cell.is_some() && r.status == Status::Error).count(), 2);
    assert_eq!(records.last().unwrap().error.as_ref().unwrap().kind, "sweep-cells-failed");
}

fn tiny_conv() -> Value {
    json!({ "kind": "spec", "spec": {
        "input": { "kind": "image", "channels": 1, "height": 4, "width": 4 },
        "layers": [
            { "kind": "conv2d", "in_channels": 1, "out_channels": 2, "kernel": 3, "padding": 1 },
            { "kind": "relu" },
            { "kind": "flatten" },
            { "kind": "dense", "input": 32, "output": 3 }
        ],
        "classes": 3 } })
}

#[test]
fn rank_and_local_minima_and_attack_commands_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut image_data = synthetic();
    image_data["dim"] = json!(16);
    image_data["image"] = json!({ "kind": "image", "channels": 1, "height": 4, "width": 4 });

    let rank = json!({
        "data": image_data,
        "model": tiny_conv(),
        "rank": { "pretrain": train(3), "finetune": { "mode": "rank-min", "epochs": 3, "clip_epochs": 2, "train": train(3) } }
    });
    let r = stdout_json(&run("rank", &write_config(dir.path(), "rank.json", &rank), &out, &[]));
    assert_eq!(r["metrics"]["final_ranks"].as_array().unwrap().len(), 2);
    let spectrum = fs::read_to_string(out.join(r["artifacts"][1].as_str().unwrap())).unwrap();
    assert!(spectrum.starts_with("phase,epoch,layer,effective_rank,top,bottom"));
    assert!(spectrum.lines().any(|l| l.starts_with("init,0,0,")));
    assert!(spectrum.lines().any(|l| l.starts_with("finetune,3,")));

    let lm = json!({
        "data": synthetic(),
        "model": { "kind": "mlp", "hidden": [6, 6] },
        "trap": {
            "init": { "kind": "linear-embed" },
            "optimizer": { "kind": "gd" },
            "schedule": { "kind": "constant", "lr": 0.01 },
            "epochs": 5,
            "linear": { "weight_decay": 0.01 },
            "spectrum": { "iters": 50 }
        }
    });
    let m = stdout_json(&run("local-minima", &write_config(dir.path(), "lm.json", &lm), &out, &[]));
    for side in ["before", "after"] {
        let rep = &m["metrics"][side];
        assert!(rep["loss"].is_f64() && rep["grad_norm"].is_f64() && rep["max_ev"]["eigenvalue"].is_f64());
        assert!(rep["min_activation"].as_f64().unwrap() > 0.0);
    }
    assert_eq!(m["metrics"]["stayed_positive"], json!(true));

    let attack = json!({
        "data": synthetic(),
        "model": { "kind": "mlp", "hidden": [8] },
        "attack": {
            "train": { "epochs": 2, "batch_size": 8, "schedule": { "kind": "constant", "lr": 0.05 },
                       "attack": { "epsilon": 0.05, "step_size": 0.02, "steps": 3, "random_start": true } },
            "eval": { "epsilon": 0.0, "step_size": 0.0, "steps": 5, "random_start": false }
        }
    });
    let a = stdout_json(&run("attack", &write_config(dir.path(), "atk.json", &attack), &out, &[]));
    assert_eq!(a["metrics"]["adversarial_training"], json!(true));
    assert_eq!(a["metrics"]["robust_acc"], a["metrics"]["clean_acc"]);

    let records = read_records(&out).unwrap();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert_eq!(r.status, Status::Ok);
        check_artifacts(&out, r);
    }
}

/// Five training files and a test file of `per_file` random records each.
fn write_cifar_fixture(dir: &Path, per_file: usize) {
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as usize
    };
    for name in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
        let size = cifar_shape().size();
        let data = (0..size * per_file).map(|_| (next() % 256) as f64 / 255.0).collect();
        let labels = (0..per_file).map(|_| next() % 10).collect();
        let batch = Batch::new(Tensor::new(cifar_shape(), per_file, data).unwrap(), labels, 10).unwrap();
        fs::write(dir.join(name), encode_cifar_batch(&batch).unwrap()).unwrap();
    }
}

#[test]
fn cifar_data_comes_from_the_environment_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("cifar");
    fs::create_dir_all(&data_dir).unwrap();
    write_cifar_fixture(&data_dir, 4);
    let cfg = json!({
        "data": { "source": "cifar10", "flatten": true, "train_limit": 12, "normalization": "per_channel" },
        "model": { "kind": "mlp", "hidden": [4] },
        "norm_bias": { "train": train(1), "weight_decay": 0.001, "coefficient": 0.001 }
    });
    let path = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("out");
    let args = ["norm-bias", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()];

    let without = probe(&args, &[]);
    assert_eq!(without.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&without.stderr).contains("PROBE_DATA_DIR"));

    let with = probe(&args, &[("PROBE_DATA_DIR", &data_dir)]);
    let summary = stdout_json(&with);
    assert_eq!(summary["metrics"]["param_count"], json!(3072 * 4 + 4 + 4 * 10 + 10));
}
