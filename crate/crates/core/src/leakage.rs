//! Information-leakage diagnostic: adversarial training accuracy that stays
//! above clean training accuracy signals that the attack and training passes
//! share batch statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochGap {
    pub epoch: usize,
    pub clean_accuracy: f64,
    pub adv_accuracy: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub gaps: Vec<EpochGap>,
    /// Longest run of consecutive epochs with a positive gap.
    pub longest_positive_run: usize,
    /// Run length needed to raise the flag.
    pub window: usize,
    pub flagged: bool,
}

/// Minimum sustained window for `n` logged epochs: 20% of them, rounded
/// up, and never a single epoch unless only one was logged.
pub fn leakage_window(n: usize) -> usize {
    (n * 2).div_ceil(10).max(2).min(n.max(1))
}

pub fn leakage_diagnostic(records: &[MetricsRecord]) -> Result<LeakageReport> {
    if records.is_empty() {
        return Err(Error::Invalid("leakage diagnostic needs at least one epoch record".into()));
    }
    let mut gaps = Vec::with_capacity(records.len());
    for r in records {
        let (Some(clean), Some(adv)) = (r.clean, r.adv) else {
            return Err(Error::Invalid(format!(
                "epoch {} lacks per-pass clean and adversarial accuracies",
                r.epoch
            )));
        };
        gaps.push(EpochGap {
            epoch: r.epoch,
            clean_accuracy: clean.accuracy,
            adv_accuracy: adv.accuracy,
            gap: adv.accuracy - clean.accuracy,
        });
    }
    let mut longest = 0;
    let mut run = 0;
    for g in &gaps {
        run = if g.gap > 0.0 { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    let window = leakage_window(gaps.len());
    Ok(LeakageReport {
        gaps,
        longest_positive_run: longest,
        window,
        flagged: longest >= window,
    })
}
