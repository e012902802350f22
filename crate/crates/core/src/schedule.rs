//! Epoch calibration for equal-budget comparisons.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, PAdv, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub effective_epochs: usize,
    pub effective_decay_epochs: Vec<usize>,
}

impl Schedule {
    pub fn uncalibrated(epochs: usize, decay_epochs: &[usize]) -> Self {
        Self {
            effective_epochs: epochs,
            effective_decay_epochs: decay_epochs.to_vec(),
        }
    }

    /// Learning rate for 0-based `epoch`: `base · factor^(#decay points ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize, base: f64, factor: f64) -> f64 {
        let hits = self
            .effective_decay_epochs
            .iter()
            .filter(|&&d| d <= epoch)
            .count();
        base * factor.powi(hits as i32)
    }

    pub fn lrs(&self, base: f64, factor: f64) -> Vec<f64> {
        (0..self.effective_epochs)
            .map(|e| self.lr_at(e, base, factor))
            .collect()
    }
}

/// `a / b` rounded to nearest, ties toward zero.
pub fn round_half_down(numer: u64, denom: u64) -> u64 {
    let (q, r) = (numer / denom, numer % denom);
    if 2 * r > denom {
        q + 1
    } else {
        q
    }
}

fn scale(value: usize, factor: Ratio<u64>) -> u64 {
    // value / (num/den) = value·den / num
    round_half_down(value as u64 * factor.denom(), *factor.numer())
}

/// Divides the epoch count and every decay point by `factor`.
pub fn scale_schedule(base_epochs: usize, decay_epochs: &[usize], factor: Ratio<u64>) -> Result<Schedule> {
    if *factor.numer() == 0 {
        return Err(Error::Invalid("cost factor must be positive".into()));
    }
    let effective = scale(base_epochs, factor) as usize;
    if effective == 0 {
        return Err(Error::config(
            "base_epochs",
            format!("{base_epochs} epochs / {factor} rounds to 0"),
        ));
    }
    let decays: Vec<usize> = decay_epochs.iter().map(|&d| scale(d, factor) as usize).collect();
    if decays.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "decay_epochs",
            format!("{decay_epochs:?} / {factor} collapses to {decays:?}"),
        ));
    }
    Ok(Schedule {
        effective_epochs: effective,
        effective_decay_epochs: decays,
    })
}

/// Calibrated schedule for an adversarial fraction `p_adv` and `steps`-step
/// attack: every epoch count is divided by `1 + p_adv·K` with
/// round-half-down on the exact rational.
pub fn calibrate_schedule(
    base_epochs: usize,
    decay_epochs: &[usize],
    p_adv: PAdv,
    steps: u32,
) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::config("attack.steps", "must be at least 1"));
    }
    let factor = Ratio::from_integer(1) + p_adv.ratio() * Ratio::from_integer(steps as u64);
    scale_schedule(base_epochs, decay_epochs, factor)
}

/// Relative per-epoch cost of a configuration against vanilla training.
pub fn cost_factor(cfg: &TrainConfig) -> Ratio<u64> {
    let k = Ratio::from_integer(cfg.attack.steps as u64);
    match cfg.mode {
        Mode::Vanilla => Ratio::from_integer(1),
        Mode::Advprop => k + Ratio::from_integer(2),
        Mode::Fast => Ratio::from_integer(1) + cfg.p_adv.ratio() * k,
    }
}

/// The schedule a configuration trains with.
pub fn schedule_for(cfg: &TrainConfig) -> Result<Schedule> {
    if cfg.calibrate_epochs {
        scale_schedule(cfg.base_epochs, &cfg.decay_epochs, cost_factor(cfg))
    } else {
        Ok(Schedule::uncalibrated(cfg.base_epochs, &cfg.decay_epochs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(a: u64, b: u64) -> PAdv {
        PAdv::new(a, b).unwrap()
    }

    #[test]
    fn epoch_column_for_the_p_adv_sweep() {
        let decay = [30, 60, 90, 100];
        for (pa, expect) in [((0, 1), 105), ((1, 9), 94), ((1, 5), 87), ((1, 3), 79), ((1, 2), 70)] {
            let s = calibrate_schedule(105, &decay, p(pa.0, pa.1), 1).unwrap();
            assert_eq!(s.effective_epochs, expect, "p_adv {pa:?}");
        }
    }

    #[test]
    fn decay_points_scale_with_the_same_rule() {
        let s = calibrate_schedule(105, &[30, 60, 90, 100], p(1, 5), 1).unwrap();
        assert_eq!(s.effective_decay_epochs, vec![25, 50, 75, 83]);
    }

    #[test]
    fn rounding_ties_go_down() {
        assert_eq!(round_half_down(175, 2), 87);
        assert_eq!(round_half_down(189, 2), 94);
        assert_eq!(round_half_down(315, 4), 78 + 1);
        assert_eq!(round_half_down(7, 7), 1);
    }

    #[test]
    fn zero_epochs_rejected() {
        assert!(calibrate_schedule(1, &[], p(1, 1), 5).is_err());
    }

    #[test]
    fn advprop_budget_factor() {
        let mut c = TrainConfig::advprop(5);
        c.base_epochs = 105;
        c.decay_epochs = vec![30, 60, 90, 100];
        let s = schedule_for(&c).unwrap();
        assert_eq!(s.effective_epochs, 15);
        assert_eq!(s.effective_decay_epochs, vec![4, 9, 13, 14]);
    }

    #[test]
    fn step_decay_learning_rate() {
        let s = Schedule::uncalibrated(6, &[2, 4]);
        let lrs = s.lrs(0.1, 0.1);
        let expect = [0.1, 0.1, 0.01, 0.01, 0.001, 0.001];
        for (a, b) in lrs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
