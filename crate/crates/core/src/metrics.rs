//! Append-only per-epoch training records.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::trainer::PassStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

impl PassSummary {
    pub fn from_stats(s: &PassStats) -> Option<Self> {
        Some(Self {
            accuracy: s.accuracy()?,
            loss: s.mean_loss()?,
            count: s.count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    /// 0-based epoch this record closes.
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    pub lr: f64,
    pub clean: Option<PassSummary>,
    pub noise: Option<PassSummary>,
    pub adv: Option<PassSummary>,
    pub val_accuracy: Option<f64>,
    /// Largest realized ℓ∞ perturbation of the epoch's adversarial examples.
    #[serde(default)]
    pub max_perturbation: Option<f64>,
    /// Cumulative training pass-units.
    pub ledger_total: u64,
    pub wall_time_s: f64,
}

pub fn append_record(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

/// Parses line-delimited records. A final line without its newline (an
/// interrupted write) is ignored; any other malformed line is an error.
pub fn read_records(input: impl BufRead) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i == last => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_records(BufReader::new(std::fs::File::open(path)?))
}

/// Rewrites `path` keeping only records of the first `epochs` epochs.
pub fn truncate_records(path: &Path, epochs: usize) -> Result<()> {
    let kept: Vec<MetricsRecord> = load_records(path)?
        .into_iter()
        .filter(|r| r.epoch < epochs)
        .collect();
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
