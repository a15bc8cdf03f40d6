//! Append-only JSON-lines run records and CSV artifacts.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RECORDS_FILE: &str = "runs.jsonl";
pub const RECORD_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub messages: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: u32,
    pub command: String,
    pub status: Status,
    /// Hash of `config`, or of the cell config for sweep cells.
    pub config_hash: String,
    pub config: Value,
    pub overrides: Vec<String>,
    pub config_file: Option<String>,
    /// Sweep cell coordinates; `None` for whole-experiment records.
    pub cell: Option<Value>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub metrics: Value,
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
    pub error: Option<ErrorInfo>,
    pub tool_version: String,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn records_path(out: &Path) -> PathBuf {
    out.join(RECORDS_FILE)
}

/// Appends one record as a single write.
pub fn append_record(out: &Path, record: &RunRecord) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let mut line = serde_json::to_string(record).expect("run records serialize");
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(records_path(out))?;
    f.write_all(line.as_bytes())?;
    f.sync_data()
}

/// Parses every complete record line; unreadable lines are skipped.
pub fn read_records(out: &Path) -> std::io::Result<Vec<RunRecord>> {
    let path = records_path(out);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

/// Latest successful record per config hash.
pub fn completed(out: &Path) -> std::io::Result<HashMap<String, RunRecord>> {
    Ok(read_records(out)?
        .into_iter()
        .filter(|r| r.status == Status::Ok)
        .map(|r| (r.config_hash.clone(), r))
        .collect())
}

/// Writes via a temporary file and rename.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(tmp, path)
}

/// Appends CSV rows, writing `header` first when the file is new.
pub fn append_csv(path: &Path, header: &str, rows: &str) -> std::io::Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut chunk = String::new();
    if fresh {
        chunk.push_str(header);
        chunk.push('\n');
    }
    chunk.push_str(rows);
    f.write_all(chunk.as_bytes())
}
