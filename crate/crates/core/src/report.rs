//! Summary table over run directories, as CSV and aligned text.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bench::CorruptionType;
use crate::config::{ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::leakage::leakage_diagnostic;
use crate::ledger::CostLedger;
use crate::metrics::load_records;
use crate::run::{read_summary, theoretical_total, CONFIG_FILE, LEDGER_FILE, METRICS_FILE};

pub const MISSING: &str = "MISSING";

pub const COLUMNS: [&str; 16] = [
    "run",
    "mode",
    "p_adv",
    "K",
    "beta",
    "rebalance",
    "sync",
    "shuffle_bn",
    "random_init",
    "epochs",
    "budget",
    "budget_match",
    "clean_acc",
    "corruption_acc",
    "corruption_score",
    "leakage",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub cells: Vec<String>,
}

impl ReportRow {
    pub fn get(&self, column: &str) -> Option<&str> {
        COLUMNS
            .iter()
            .position(|c| *c == column)
            .map(|i| self.cells[i].as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn normalized(per_type: &BTreeMap<CorruptionType, f64>, reference: &BTreeMap<CorruptionType, f64>) -> Option<f64> {
    let ratios: Option<Vec<f64>> = per_type
        .iter()
        .map(|(k, e)| reference.get(k).map(|r| if e == r { 1.0 } else { e / r }))
        .collect();
    let ratios = ratios?;
    (!ratios.is_empty()).then(|| 100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// One row per run directory. The corruption score is normalized by
/// `reference` if given, else by the first vanilla run that has
/// corruption results, else reported as missing.
pub fn cmd_report(dirs: &[PathBuf], reference: Option<&Path>) -> Result<Report> {
    if dirs.is_empty() {
        return Err(Error::config("runs", "report needs at least one run directory"));
    }
    let summaries = dirs
        .iter()
        .map(|d| read_summary(d).ok().flatten())
        .collect::<Vec<_>>();
    let configs = dirs
        .iter()
        .map(|d| ExperimentConfig::load(&d.join(CONFIG_FILE), &[]).ok())
        .collect::<Vec<_>>();
    let reference_errors = match reference {
        Some(r) => Some(crate::run::reference_errors(r)?),
        None => configs
            .iter()
            .zip(&summaries)
            .find_map(|(c, s)| match (c, s) {
                (Some(c), Some(s)) if c.train.mode == Mode::Vanilla => {
                    s.corruption.as_ref().map(|x| x.per_type_error.clone())
                }
                _ => None,
            }),
    };

    let mut rows = Vec::with_capacity(dirs.len());
    for ((dir, cfg), summary) in dirs.iter().zip(&configs).zip(&summaries) {
        let mut cells = vec![MISSING.to_string(); COLUMNS.len()];
        cells[0] = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |s| s.to_string_lossy().into_owned());
        if let Some(cfg) = cfg {
            let t = &cfg.train;
            cells[1] = t.mode.to_string();
            cells[2] = t.effective_p_adv().to_string();
            cells[3] = match t.mode {
                Mode::Vanilla => "0".into(),
                _ => t.attack.steps.to_string(),
            };
            cells[4] = format!("{}", t.effective_beta());
            cells[5] = t.rebalance.to_string();
            cells[6] = t.sync_update_speed.to_string();
            cells[7] = t.shuffle_bn.to_string();
            cells[8] = t.attack.random_init.to_string();
            if let Ok(s) = crate::schedule::schedule_for(t) {
                cells[9] = s.effective_epochs.to_string();
            }
            if let Ok(ledger) = CostLedger::load(&dir.join(LEDGER_FILE)) {
                if let Some(first) = ledger.epochs().first() {
                    let theory = theoretical_total(cfg, first.examples, ledger.epochs().len());
                    cells[10] = format!("{}/{}", ledger.training_total(), theory);
                    cells[11] = (theory.is_integer() && theory.to_integer() == ledger.training_total()).to_string();
                }
            }
            if t.mode != Mode::Vanilla {
                if let Ok(records) = load_records(&dir.join(METRICS_FILE)) {
                    if let Ok(l) = leakage_diagnostic(&records) {
                        cells[15] = l.flagged.to_string();
                    }
                }
            } else {
                cells[15] = "n/a".into();
            }
        }
        if let Some(s) = summary {
            cells[12] = pct(s.clean_accuracy);
            if let Some(c) = &s.corruption {
                cells[13] = pct(c.mean_accuracy);
                let score = c
                    .normalized_score
                    .or_else(|| reference_errors.as_ref().and_then(|r| normalized(&c.per_type_error, r)));
                if let Some(score) = score {
                    cells[14] = format!("{score:.1}");
                }
            }
        }
        rows.push(ReportRow { cells });
    }
    Ok(Report { rows })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r
                .cells
                .iter()
                .map(|c| {
                    if c.contains([',', '"', '\n']) {
                        format!("\"{}\"", c.replace('"', "\"\""))
                    } else {
                        c.clone()
                    }
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(&r.cells) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(COLUMNS.to_vec());
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r.cells.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }
}
