//! Pass-unit accounting. One unit is one example going through one
//! forward+backward traversal, whatever the gradient target.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, PAdv};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    Clean,
    /// Attack iterations, including the noise pass whose gradient is reused.
    AttackNoise,
    Adversarial,
    /// Excluded from training budgets.
    Eval,
}

impl PassKind {
    pub const ALL: [PassKind; 4] = [
        PassKind::Clean,
        PassKind::AttackNoise,
        PassKind::Adversarial,
        PassKind::Eval,
    ];

    pub fn is_training(self) -> bool {
        self != PassKind::Eval
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub step: u64,
    pub epoch: usize,
    pub kind: PassKind,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochMark {
    pub epoch: usize,
    /// Number of records belonging to this and all earlier epochs.
    pub end: usize,
    /// Distinct training examples drawn during the epoch.
    pub examples: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Pass(LedgerRecord),
    EpochEnd { epoch: usize, examples: u64 },
}

/// Append-only log of pass units.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    records: Vec<LedgerRecord>,
    epochs: Vec<EpochMark>,
    step: u64,
    epoch: usize,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn epochs(&self) -> &[EpochMark] {
        &self.epochs
    }

    pub fn set_position(&mut self, epoch: usize, step: u64) {
        self.epoch = epoch;
        self.step = step;
    }

    pub fn record_pass(&mut self, kind: PassKind, count: usize) -> Result<()> {
        if count == 0 {
            return Err(Error::Invalid("ledger records need a positive count".into()));
        }
        self.records.push(LedgerRecord {
            step: self.step,
            epoch: self.epoch,
            kind,
            count: count as u64,
        });
        Ok(())
    }

    /// Appends another ledger's records, restamped at this ledger's position.
    pub fn absorb(&mut self, pending: CostLedger) {
        for r in pending.records {
            self.records.push(LedgerRecord {
                step: self.step,
                epoch: self.epoch,
                ..r
            });
        }
    }

    pub fn close_epoch(&mut self, examples: u64) {
        self.epochs.push(EpochMark {
            epoch: self.epoch,
            end: self.records.len(),
            examples,
        });
    }

    pub fn total(&self, kind: PassKind) -> u64 {
        self.records
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.count)
            .sum()
    }

    pub fn training_total(&self) -> u64 {
        self.records
            .iter()
            .filter(|r| r.kind.is_training())
            .map(|r| r.count)
            .sum()
    }

    /// Training units of each closed epoch.
    pub fn per_epoch_training(&self) -> Vec<u64> {
        let mut start = 0;
        self.epochs
            .iter()
            .map(|m| {
                let units = self.records[start..m.end]
                    .iter()
                    .filter(|r| r.kind.is_training())
                    .map(|r| r.count)
                    .sum();
                start = m.end;
                units
            })
            .collect()
    }

    /// Keeps only the first `epochs` closed epochs (used on resume).
    pub fn truncate_epochs(&mut self, epochs: usize) {
        if epochs < self.epochs.len() {
            self.epochs.truncate(epochs);
        }
        let end = self.epochs.last().map_or(0, |m| m.end);
        self.records.truncate(end);
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let mut start = 0;
        for m in &self.epochs {
            for r in &self.records[start..m.end] {
                serde_json::to_writer(&mut out, &Line::Pass(*r))?;
                out.write_all(b"\n")?;
            }
            serde_json::to_writer(
                &mut out,
                &Line::EpochEnd {
                    epoch: m.epoch,
                    examples: m.examples,
                },
            )?;
            out.write_all(b"\n")?;
            start = m.end;
        }
        for r in &self.records[start..] {
            serde_json::to_writer(&mut out, &Line::Pass(*r))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Parses line-delimited records; a truncated trailing line is ignored.
    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut ledger = CostLedger::new();
        let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = match serde_json::from_str(line) {
                Ok(l) => l,
                Err(_) if i == last => break,
                Err(e) => return Err(e.into()),
            };
            match parsed {
                Line::Pass(r) => {
                    ledger.step = r.step;
                    ledger.epoch = r.epoch;
                    ledger.records.push(r);
                }
                Line::EpochEnd { epoch, examples } => {
                    ledger.epoch = epoch;
                    ledger.close_epoch(examples);
                }
            }
        }
        Ok(ledger)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

/// Parameters of the per-epoch cost formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetModel {
    pub mode: Mode,
    /// Examples drawn per epoch.
    pub n: u64,
    /// Attack steps.
    pub k: u32,
    pub p_adv: PAdv,
}

/// Pass units per epoch: `N`, `(K + 2)·N`, or `(p_adv·K + 1)·N`.
pub fn theoretical_cost(model: &BudgetModel) -> Ratio<u64> {
    let n = Ratio::from_integer(model.n);
    let k = Ratio::from_integer(model.k as u64);
    match model.mode {
        Mode::Vanilla => n,
        Mode::Advprop => (k + Ratio::from_integer(2)) * n,
        Mode::Fast => (model.p_adv.ratio() * k + Ratio::from_integer(1)) * n,
    }
}

/// Exact signed difference between an integer and a rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub numer: i128,
    pub denom: i128,
}

impl Discrepancy {
    fn between(measured: u64, theoretical: Ratio<u64>) -> Self {
        let d = *theoretical.denom() as i128;
        let num = measured as i128 * d - *theoretical.numer() as i128;
        let g = gcd(num.unsigned_abs(), d as u128).max(1) as i128;
        Self {
            numer: num / g,
            denom: d / g,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.numer == 0
    }

    pub fn value(&self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

impl fmt::Display for Discrepancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom == 1 {
            write!(f, "{}", self.numer)
        } else {
            write!(f, "{}/{}", self.numer, self.denom)
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochAudit {
    pub epoch: usize,
    pub measured: u64,
    pub theoretical: String,
    pub discrepancy: Discrepancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub model: BudgetModel,
    pub epochs: Vec<EpochAudit>,
    pub measured_total: u64,
    pub theoretical_per_epoch: String,
    #[serde(rename = "match")]
    pub matched: bool,
}

fn ratio_string(r: Ratio<u64>) -> String {
    if *r.denom() == 1 {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Compares every closed epoch of `ledger` with `theoretical_cost(model)`.
pub fn audit(ledger: &CostLedger, model: &BudgetModel) -> Result<AuditReport> {
    if ledger.epochs().is_empty() {
        return Err(Error::Audit("ledger has no completed epoch".into()));
    }
    if let Some(m) = ledger.epochs().iter().find(|m| m.examples != model.n) {
        return Err(Error::Audit(format!(
            "epoch {} drew {} examples but the model expects N = {}",
            m.epoch, m.examples, model.n
        )));
    }
    let theory = theoretical_cost(model);
    let epochs: Vec<EpochAudit> = ledger
        .epochs()
        .iter()
        .zip(ledger.per_epoch_training())
        .map(|(m, measured)| EpochAudit {
            epoch: m.epoch,
            measured,
            theoretical: ratio_string(theory),
            discrepancy: Discrepancy::between(measured, theory),
        })
        .collect();
    let matched = epochs.iter().all(|e| e.discrepancy.is_zero());
    Ok(AuditReport {
        model: *model,
        measured_total: ledger.training_total(),
        epochs,
        theoretical_per_epoch: ratio_string(theory),
        matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(mode: Mode, n: u64, k: u32, p: (u64, u64)) -> BudgetModel {
        BudgetModel {
            mode,
            n,
            k,
            p_adv: PAdv::new(p.0, p.1).unwrap(),
        }
    }

    #[test]
    fn record_totals() {
        let mut l = CostLedger::new();
        assert_eq!(l.training_total(), 0);
        l.record_pass(PassKind::Clean, 64).unwrap();
        l.record_pass(PassKind::Clean, 64).unwrap();
        assert_eq!(l.total(PassKind::Clean), 128);
        l.record_pass(PassKind::AttackNoise, 16).unwrap();
        l.record_pass(PassKind::Eval, 1000).unwrap();
        assert_eq!(l.total(PassKind::AttackNoise), 16);
        assert_eq!(l.total(PassKind::Adversarial), 0);
        assert_eq!(l.training_total(), 144);
        assert!(l.record_pass(PassKind::Clean, 0).is_err());
    }

    #[test]
    fn cost_formulas() {
        let n = 1000;
        assert_eq!(theoretical_cost(&model(Mode::Vanilla, n, 1, (0, 1))), Ratio::from_integer(n));
        assert_eq!(
            theoretical_cost(&model(Mode::Advprop, n, 5, (1, 1))),
            Ratio::from_integer(7 * n)
        );
        assert_eq!(
            theoretical_cost(&model(Mode::Advprop, n, 1, (1, 1))),
            Ratio::from_integer(3 * n)
        );
        assert_eq!(
            theoretical_cost(&model(Mode::Fast, n, 1, (1, 5))),
            Ratio::new(6 * n, 5)
        );
        assert_eq!(
            theoretical_cost(&model(Mode::Fast, n, 1, (1, 1))),
            Ratio::from_integer(2 * n)
        );
    }

    #[test]
    fn jsonl_round_trip_and_truncated_tail() {
        let mut l = CostLedger::new();
        l.record_pass(PassKind::Clean, 64).unwrap();
        l.record_pass(PassKind::Adversarial, 16).unwrap();
        l.close_epoch(80);
        l.set_position(1, 2);
        l.record_pass(PassKind::Clean, 64).unwrap();
        let mut buf = Vec::new();
        l.write_jsonl(&mut buf).unwrap();
        let back = CostLedger::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.records(), l.records());
        assert_eq!(back.epochs(), l.epochs());

        buf.extend_from_slice(b"{\"type\":\"pass\",\"st");
        let back = CostLedger::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.records().len(), 3);
    }

    #[test]
    fn audit_rejects_wrong_n() {
        let mut l = CostLedger::new();
        l.record_pass(PassKind::Clean, 64).unwrap();
        l.close_epoch(64);
        assert!(audit(&l, &model(Mode::Vanilla, 128, 1, (0, 1))).is_err());
        assert!(audit(&CostLedger::new(), &model(Mode::Vanilla, 64, 1, (0, 1))).is_err());
        assert!(audit(&l, &model(Mode::Vanilla, 64, 1, (0, 1))).unwrap().matched);
    }
}
