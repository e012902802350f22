//! Epoch loop shared by the CLI and the test suites.

use std::time::Instant;

use crate::bench::evaluate_accuracy;
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{batch_iter, load_idx, synth_blobs, synth_patterns, Dataset};
use crate::error::{Error, Result};
use crate::ledger::{audit, AuditReport, BudgetModel};
use crate::metrics::{MetricsRecord, PassSummary};
use crate::nn::Network;
use crate::rng::{derive_path, derive_seed};
use crate::schedule::{schedule_for, Schedule};
use crate::tensor::Scalar;
use crate::trainer::{StepMetrics, Trainer};

// Stream tags under the run seed.
const INIT: u64 = 100;
const ORDER: u64 = 101;
const STEP: u64 = 102;

/// Train and test splits for a configuration.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let shape = (d.channels, d.height, d.width);
    match d.source {
        DataSource::SynthBlobs | DataSource::SynthPatterns => {
            // One draw, split, so both splits share class prototypes.
            let n = d.train_size + d.test_size;
            let all = match d.source {
                DataSource::SynthBlobs => synth_blobs(n, d.classes, shape, d.separation, d.seed)?,
                _ => synth_patterns(n, d.classes, shape, &d.patterns, d.seed)?,
            };
            let mut train = all.subset(&(0..d.train_size).collect::<Vec<_>>())?;
            let mut test = all.subset(&(d.train_size..n).collect::<Vec<_>>())?;
            train.split = "train".into();
            test.split = "test".into();
            Ok((train, test))
        }
        DataSource::Idx => {
            let need = |p: &Option<std::path::PathBuf>, f: &str| {
                p.clone().ok_or_else(|| Error::config(format!("data.{f}"), "required for idx source"))
            };
            let train = load_idx(&need(&d.train_images, "train_images")?, &need(&d.train_labels, "train_labels")?, "train")?;
            let test = match (&d.test_images, &d.test_labels) {
                (Some(i), Some(l)) => load_idx(i, l, "test")?,
                _ => return Err(Error::config("data.test_images", "required for idx source")),
            };
            Ok((train, test))
        }
    }
}

pub fn init_network<T: Scalar>(cfg: &ExperimentConfig, data: &Dataset) -> Result<Network<T>> {
    let (c, h, w) = data.image_shape();
    Network::from_spec(&cfg.net_spec(c, h, w, data.classes()), derive_seed(cfg.train.seed, INIT))
}

pub fn new_trainer<T: Scalar>(cfg: &ExperimentConfig, data: &Dataset) -> Result<Trainer<T>> {
    cfg.validate()?;
    Trainer::new(cfg.train.clone(), init_network(cfg, data)?, data.classes())
}

/// Budget model of a run on `n` training examples.
pub fn budget_model(cfg: &ExperimentConfig, n: usize) -> BudgetModel {
    BudgetModel {
        mode: cfg.train.mode,
        n: n as u64,
        k: cfg.train.attack.steps,
        p_adv: cfg.train.p_adv,
    }
}

/// Runs one epoch. Returns aggregated per-pass statistics and the number
/// of examples drawn.
pub fn train_epoch<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &Dataset,
    epoch: usize,
    lr: f64,
) -> Result<(StepMetrics, u64)> {
    let cfg = trainer.cfg.clone();
    let total = cfg.total_batch();
    let order_seed = derive_path(cfg.seed, &[ORDER, epoch as u64]);
    let mut agg = StepMetrics::default();
    let mut examples = 0u64;
    for batch in batch_iter(data.len(), total, cfg.shards, order_seed, true)? {
        let (x, y) = batch.load::<T>(data)?;
        trainer.ledger.set_position(epoch, trainer.steps_done);
        let seed = derive_path(cfg.seed, &[STEP, trainer.steps_done]);
        let m = trainer.step(&x, &y, lr, seed)?;
        agg.merge(&m);
        examples += y.len() as u64;
    }
    if examples == 0 {
        return Err(Error::config(
            "batch_size",
            format!("{} examples cannot fill one batch of {total}", data.len()),
        ));
    }
    trainer.ledger.close_epoch(examples);
    Ok((agg, examples))
}

/// Everything a finished in-memory run produces.
#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub trainer: Trainer<T>,
    pub schedule: Schedule,
    pub records: Vec<MetricsRecord>,
}

impl<T: Scalar> RunResult<T> {
    pub fn audit(&self, n: usize) -> Result<AuditReport> {
        let model = BudgetModel {
            mode: self.trainer.cfg.mode,
            n: n as u64,
            k: self.trainer.cfg.attack.steps,
            p_adv: self.trainer.cfg.p_adv,
        };
        audit(&self.trainer.ledger, &model)
    }
}

pub fn epoch_record<T: Scalar>(
    run_id: &str,
    trainer: &Trainer<T>,
    epoch: usize,
    lr: f64,
    m: &StepMetrics,
    val_accuracy: Option<f64>,
    wall_time_s: f64,
) -> MetricsRecord {
    MetricsRecord {
        run_id: run_id.to_string(),
        epoch,
        step: trainer.steps_done,
        lr,
        clean: PassSummary::from_stats(&m.clean),
        noise: PassSummary::from_stats(&m.noise),
        adv: PassSummary::from_stats(&m.adv),
        val_accuracy,
        max_perturbation: (m.adv.count > 0).then_some(m.max_perturbation),
        ledger_total: trainer.ledger.training_total(),
        wall_time_s,
    }
}

/// Trains from `start_epoch` to the end of the schedule, calling
/// `on_epoch` after every epoch. `val` enables per-epoch validation.
pub fn run_epochs<T: Scalar>(
    trainer: &mut Trainer<T>,
    schedule: &Schedule,
    train: &Dataset,
    val: Option<&Dataset>,
    start_epoch: usize,
    run_id: &str,
    mut on_epoch: impl FnMut(&Trainer<T>, &MetricsRecord) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    let (base, factor) = (trainer.cfg.lr, trainer.cfg.lr_decay);
    for epoch in start_epoch..schedule.effective_epochs {
        let t0 = Instant::now();
        let lr = schedule.lr_at(epoch, base, factor);
        let (m, _) = train_epoch(trainer, train, epoch, lr)?;
        let val_acc = match val {
            Some(v) => Some(evaluate_accuracy(&trainer.net, v, 500)?),
            None => None,
        };
        let rec = epoch_record(run_id, trainer, epoch, lr, &m, val_acc, t0.elapsed().as_secs_f64());
        on_epoch(trainer, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Full in-memory run of `cfg` on `train`.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig, train: &Dataset, val: Option<&Dataset>) -> Result<RunResult<T>> {
    let mut trainer = new_trainer::<T>(cfg, train)?;
    let schedule = schedule_for(&cfg.train)?;
    let records = run_epochs(&mut trainer, &schedule, train, val, 0, "memory", |_, _| Ok(()))?;
    Ok(RunResult {
        trainer,
        schedule,
        records,
    })
}
