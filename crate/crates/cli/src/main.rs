use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use probe_cli::config::Command;
use probe_cli::record::ErrorInfo;
use probe_cli::run::{execute, read_config, Invocation, EXIT_CONFIG};
use serde_json::json;

/// Loss-landscape probes driven by JSON experiment configs.
#[derive(Parser, Debug)]
#[command(name = "probe", version)]
struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    command: Command,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Shorthand for `--override seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for run records and artifacts.
    #[arg(long, default_value = "probe-out")]
    out: PathBuf,
    /// `dotted.key=value`, value parsed as JSON when possible. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Skip work whose config hash already has a successful record.
    #[arg(long)]
    resume: bool,
}

fn emit_error(hash: Option<&str>, error: &ErrorInfo) {
    eprintln!("{}", json!({ "status": "error", "config_hash": hash, "error": error }));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match read_config(&cli.config) {
        Ok(v) => v,
        Err(e) => {
            emit_error(None, &ErrorInfo { kind: "config".into(), messages: vec![format!("{e:#}")] });
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let inv = Invocation {
        command: cli.command,
        config,
        config_file: Some(cli.config),
        seed: cli.seed,
        out: cli.out,
        overrides: cli.overrides,
        resume: cli.resume,
    };
    match execute(&inv) {
        Ok(outcome) => {
            let summary = json!({
                "status": if outcome.skipped { "skipped" } else { "ok" },
                "config_hash": outcome.config_hash,
                "artifacts": outcome.artifacts,
                "metrics": outcome.metrics,
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            emit_error(Some(&f.config_hash), &f.error);
            ExitCode::from(f.code as u8)
        }
    }
}
