//! Run directories and the four commands: train, eval, report, cost-audit.
//!
//! A run directory holds `config.toml` (the resolved configuration),
//! `checkpoint.bin` (rewritten after every epoch), `metrics.jsonl`,
//! `ledger.jsonl`, and `summary.json` once the run has finished.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{corruption_suite_eval, evaluate_accuracy, standard_suite, CorruptionType, SuiteReport};
use crate::checkpoint::{peek_precision, Checkpoint, CheckpointHeader};
use crate::config::{ExperimentConfig, Mode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::experiment::{budget_model, load_data, new_trainer, run_epochs};
use crate::leakage::leakage_diagnostic;
use crate::ledger::{audit, theoretical_cost, AuditReport, CostLedger};
use crate::metrics::{append_record, load_records, truncate_records, MetricsRecord};
use crate::nn::Network;
use crate::schedule::schedule_for;
use crate::tensor::{Precision, Scalar};
use crate::trainer::Trainer;

pub const HOME_ENV: &str = "ADVPROP_HOME";

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Resolves a relative run path against `$ADVPROP_HOME` when it is set.
pub fn resolve_path(p: &Path) -> PathBuf {
    match std::env::var_os(HOME_ENV) {
        Some(home) if p.is_relative() => PathBuf::from(home).join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSummary {
    pub mean_accuracy: f64,
    pub mean_error: f64,
    pub per_type_error: BTreeMap<CorruptionType, f64>,
    pub normalized_score: Option<f64>,
}

impl From<&SuiteReport> for CorruptionSummary {
    fn from(r: &SuiteReport) -> Self {
        Self {
            mean_accuracy: r.mean_accuracy,
            mean_error: r.mean_error,
            per_type_error: r.per_type.clone(),
            normalized_score: r.normalized_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    /// Examples drawn per epoch.
    pub n: u64,
    pub measured_total: u64,
    pub budget_match: bool,
    pub clean_accuracy: f64,
    pub corruption: Option<CorruptionSummary>,
    pub leakage_flag: Option<bool>,
    pub wall_time_s: f64,
}

/// Reference per-type errors for score normalization, read from a finished
/// run directory.
pub fn reference_errors(run_dir: &Path) -> Result<BTreeMap<CorruptionType, f64>> {
    let s = read_summary(run_dir)?
        .ok_or_else(|| Error::Invalid(format!("{} has no {SUMMARY_FILE}", run_dir.display())))?;
    s.corruption
        .map(|c| c.per_type_error)
        .ok_or_else(|| Error::Invalid(format!("{} has no corruption results", run_dir.display())))
}

pub fn read_summary(run_dir: &Path) -> Result<Option<RunSummary>> {
    let p = run_dir.join(SUMMARY_FILE);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue an existing run from its last checkpoint.
    pub resume: bool,
    /// Finished run whose corruption errors normalize the score.
    pub reference: Option<PathBuf>,
    /// Stop once this many epochs are complete, leaving a resumable run.
    pub stop_after: Option<usize>,
}

/// Trains the configuration into `run_dir`. Returns `None` when the run
/// stopped early through `stop_after`.
pub fn cmd_train(cfg: &ExperimentConfig, run_dir: &Path, opts: &TrainOptions) -> Result<Option<RunSummary>> {
    cfg.validate()?;
    let reference = opts.reference.as_deref().map(reference_errors).transpose()?;
    match cfg.precision {
        Precision::F32 => train_in::<f32>(cfg, run_dir, opts, reference.as_ref()),
        Precision::F64 => train_in::<f64>(cfg, run_dir, opts, reference.as_ref()),
    }
}

fn train_in<T: Scalar>(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    opts: &TrainOptions,
    reference: Option<&BTreeMap<CorruptionType, f64>>,
) -> Result<Option<RunSummary>> {
    let t0 = Instant::now();
    std::fs::create_dir_all(run_dir)?;
    let ck_path = run_dir.join(CHECKPOINT_FILE);
    let metrics_path = run_dir.join(METRICS_FILE);
    let ledger_path = run_dir.join(LEDGER_FILE);
    let (train, test) = load_data(cfg)?;
    let full = schedule_for(&cfg.train)?;
    let mut schedule = full.clone();
    if let Some(stop) = opts.stop_after {
        schedule.effective_epochs = schedule.effective_epochs.min(stop);
    }

    let (mut trainer, start) = if ck_path.exists() {
        if !opts.resume {
            return Err(Error::config(
                "out",
                format!("{} already holds a run; pass --resume to continue it", run_dir.display()),
            ));
        }
        let saved = std::fs::read_to_string(run_dir.join(CONFIG_FILE))?;
        if ExperimentConfig::from_toml_with(&saved, &[])? != *cfg {
            return Err(Error::config("<config>", "differs from the configuration of the run being resumed"));
        }
        let ck = Checkpoint::<T>::load(&ck_path)?;
        let mut trainer = Trainer::new(cfg.train.clone(), ck.net, ck.header.classes)?;
        trainer.velocity = ck.velocity;
        trainer.steps_done = ck.header.steps_done;
        let mut ledger = CostLedger::load(&ledger_path)?;
        ledger.truncate_epochs(ck.header.epoch);
        ledger.save(&ledger_path)?;
        trainer.ledger = ledger;
        truncate_records(&metrics_path, ck.header.epoch)?;
        (trainer, ck.header.epoch)
    } else {
        for f in [METRICS_FILE, LEDGER_FILE, SUMMARY_FILE] {
            let p = run_dir.join(f);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
        std::fs::write(run_dir.join(CONFIG_FILE), cfg.to_toml())?;
        (new_trainer::<T>(cfg, &train)?, 0)
    };

    let run_id = run_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mode = cfg.train.mode;
    let seed = cfg.train.seed;
    let result = run_epochs(&mut trainer, &schedule, &train, Some(&test), start, &run_id, |tr, rec| {
        append_record(&metrics_path, rec)?;
        tr.ledger.save(&ledger_path)?;
        Checkpoint {
            header: CheckpointHeader {
                layers: tr.net.descs(),
                epoch: rec.epoch + 1,
                steps_done: tr.steps_done,
                mode,
                seed,
                classes: tr.classes,
            },
            net: tr.net.clone(),
            velocity: tr.velocity.clone(),
        }
        .save(&ck_path)
    });
    if let Err(e) = result {
        // Keep artifacts of the completed epochs.
        trainer.ledger.save(&ledger_path).ok();
        return Err(e);
    }

    if schedule.effective_epochs < full.effective_epochs {
        return Ok(None);
    }
    let records = load_records(&metrics_path)?;
    let n = trainer.ledger.epochs().first().map_or(0, |m| m.examples);
    let report = audit(&trainer.ledger, &budget_model(cfg, n as usize))?;
    let clean_accuracy = evaluate_accuracy(&trainer.net, &test, cfg.eval.batch_size)?;
    let corruption = if cfg.eval.corruptions {
        let suite = corruption_suite_eval(
            &trainer.net,
            &test,
            &standard_suite(cfg.eval.corruption_seed),
            reference,
            cfg.eval.batch_size,
        )?;
        Some(CorruptionSummary::from(&suite))
    } else {
        None
    };
    let summary = RunSummary {
        epochs: full.effective_epochs,
        n,
        measured_total: report.measured_total,
        budget_match: report.matched,
        clean_accuracy,
        corruption,
        leakage_flag: leakage_flag(mode, &records),
        wall_time_s: t0.elapsed().as_secs_f64() + records.iter().take(start).map(|r| r.wall_time_s).sum::<f64>(),
    };
    std::fs::write(run_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(Some(summary))
}

fn leakage_flag(mode: Mode, records: &[MetricsRecord]) -> Option<bool> {
    match mode {
        Mode::Vanilla => None,
        _ => leakage_diagnostic(records).ok().map(|r| r.flagged),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub examples: usize,
    pub clean_accuracy: f64,
    pub corruption: Option<CorruptionSummary>,
    pub warning: Option<String>,
}

/// Where `cmd_eval` takes its images from.
#[derive(Debug, Clone)]
pub enum EvalData {
    /// Test split regenerated from a run configuration.
    Config(ExperimentConfig),
    /// A dataset container file.
    File(PathBuf),
}

/// Read-only evaluation of a checkpoint (Main branch, running statistics).
pub fn cmd_eval(
    checkpoint: &Path,
    data: &EvalData,
    corruptions: Option<u64>,
    reference: Option<&BTreeMap<CorruptionType, f64>>,
    batch: usize,
) -> Result<EvalScores> {
    let bytes = std::fs::read(checkpoint)?;
    let dataset = match data {
        EvalData::Config(cfg) => load_data(cfg)?.1,
        EvalData::File(p) => Dataset::load(p)?,
    };
    match peek_precision(&bytes)? {
        Precision::F32 => eval_net(&load_net::<f32>(&bytes)?, &dataset, corruptions, reference, batch),
        Precision::F64 => eval_net(&load_net::<f64>(&bytes)?, &dataset, corruptions, reference, batch),
    }
}

fn load_net<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    Ok(Checkpoint::<T>::from_container(&crate::checkpoint::Container::from_bytes(bytes)?)?.net)
}

fn eval_net<T: Scalar>(
    net: &Network<T>,
    data: &Dataset,
    corruptions: Option<u64>,
    reference: Option<&BTreeMap<CorruptionType, f64>>,
    batch: usize,
) -> Result<EvalScores> {
    let clean_accuracy = evaluate_accuracy(net, data, batch)?;
    let (corruption, warning) = match corruptions {
        Some(seed) => {
            let suite = corruption_suite_eval(net, data, &standard_suite(seed), reference, batch)?;
            (Some(CorruptionSummary::from(&suite)), suite.warning)
        }
        None => (None, None),
    };
    Ok(EvalScores {
        examples: data.len(),
        clean_accuracy,
        corruption,
        warning,
    })
}

/// Audits the ledger of a run directory against its configuration.
pub fn cmd_cost_audit(run_dir: &Path) -> Result<AuditReport> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE), &[])?;
    let ledger = CostLedger::load(&run_dir.join(LEDGER_FILE))?;
    let n = ledger
        .epochs()
        .first()
        .map(|m| m.examples)
        .ok_or_else(|| Error::Audit("ledger has no completed epoch".into()))?;
    audit(&ledger, &budget_model(&cfg, n as usize))
}

/// Planned total pass-units of a configuration over `epochs` epochs of `n`.
pub fn theoretical_total(cfg: &ExperimentConfig, n: u64, epochs: usize) -> num_rational::Ratio<u64> {
    theoretical_cost(&budget_model(cfg, n as usize)) * num_rational::Ratio::from_integer(epochs as u64)
}
