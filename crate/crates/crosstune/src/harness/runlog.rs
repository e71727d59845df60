//! Run records on disk. One JSON object per line, append only, so a run
//! log survives partial writes and can be merged across sessions. Records
//! carry no timestamps; equal inputs produce byte-equal logs.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::FtStrategy;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub eval_task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ft_task: Option<String>,
    pub strategy: FtStrategy,
    pub seed: u64,
    /// Aggregate F1 keyed by shot count.
    pub scores: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn runlog_err(path: &Path, message: impl Into<String>) -> HarnessError {
    HarnessError::RunLog {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Appends records to `path`, creating it if needed.
pub fn persist_runs(path: &Path, records: &[RunRecord]) -> Result<(), HarnessError> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| runlog_err(path, e.to_string()))?;
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| runlog_err(path, e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| runlog_err(path, e.to_string()))?;
    }
    Ok(())
}

/// Reads every parseable record. Corrupt lines are counted and skipped,
/// not fatal; a half-written tail must not block reading what came before.
pub fn load_runs(path: &Path) -> Result<(Vec<RunRecord>, usize), HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| runlog_err(path, e.to_string()))?;
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| runlog_err(path, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(&line) {
            Ok(record) => records.push(record),
            Err(e) => {
                eprintln!(
                    "warning: {} line {}: skipping unreadable record: {e}",
                    path.display(),
                    idx + 1
                );
                skipped += 1;
            }
        }
    }
    Ok((records, skipped))
}
