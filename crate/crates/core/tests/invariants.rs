//! Property tests for batching, splitting, shuffling, gradient algebra,
//! calibration and the cost ledger.

use std::collections::BTreeSet;

use advprop::bench::{corrupt, CorruptionSpec, CorruptionType};
use advprop::checkpoint::{Checkpoint, CheckpointHeader};
use advprop::config::{ExperimentConfig, Mode, PAdv, TrainConfig};
use advprop::data::{batch_iter, synth_patterns};
use advprop::experiment::{budget_model, load_data, run_experiment};
use advprop::ledger::{audit, theoretical_cost, BudgetModel, CostLedger, PassKind};
use advprop::nn::{GradSet, NetSpec, Network, ParamRole};
use advprop::schedule::{calibrate_schedule, round_half_down};
use advprop::tensor::Tensor;
use advprop::trainer::{
    combine_gradients, rescale_for_update_speed, shuffle_across_shards, split_batch, update_speed_factors,
    GradientBundle,
};
use num_rational::Ratio;
use proptest::prelude::*;

fn p_adv() -> impl Strategy<Value = (u64, u64)> {
    (1u64..12).prop_flat_map(|d| (0..=d, Just(d)))
}

fn rows(n: usize, seed: u64) -> Tensor<f64> {
    let mut t = Tensor::randn(&[n, 3], 1.0, seed);
    // Tag row i so the permutation is recoverable from the data itself.
    for (i, row) in t.data_mut().chunks_mut(3).enumerate() {
        row[0] = i as f64;
    }
    t
}

/// `a/b` to nearest integer, ties down, via `⌊(2a + b − 1) / 2b⌋`.
fn nearest_ties_down(a: u64, b: u64) -> u64 {
    if 2 * a < b {
        0
    } else {
        (2 * a + b - 1) / (2 * b)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition_of_the_requested_size(n in 1usize..80, (a, b) in p_adv(), seed in any::<u64>()) {
        let x = rows(n, seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 7).collect();
        let p = PAdv::new(a, b).unwrap();
        let want = Ratio::new(a, b) * Ratio::from_integer(n as u64);
        match split_batch(&x, &labels, p, seed) {
            Err(_) => prop_assert!(!want.is_integer()),
            Ok(s) => {
                prop_assert!(want.is_integer());
                prop_assert_eq!(s.adv_rows.len() as u64, want.to_integer());
                let all: BTreeSet<usize> = s.clean_rows.iter().chain(&s.adv_rows).copied().collect();
                prop_assert_eq!(all.len(), n);
                prop_assert_eq!(s.clean_rows.len() + s.adv_rows.len(), n);
                for (part, rows) in [(&s.clean, &s.clean_rows), (&s.adv, &s.adv_rows)] {
                    match part {
                        None => prop_assert!(rows.is_empty()),
                        Some((t, y)) => {
                            for (k, &r) in rows.iter().enumerate() {
                                prop_assert_eq!(t.data()[k * 3], r as f64);
                                prop_assert_eq!(y[k], labels[r]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shard_shuffle_is_a_joint_bijection(per in 1usize..12, shards in 2usize..6, seed in any::<u64>()) {
        let n = per * shards;
        let x = rows(n, seed);
        let labels: Vec<usize> = (0..n).map(|i| i * 3 % 11).collect();
        let sh = shuffle_across_shards(&x, &labels, shards, seed).unwrap();
        let mut seen = sh.perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for i in 0..n {
            // Image and label move together.
            let src = sh.x.data()[i * 3] as usize;
            prop_assert_eq!(src, sh.perm[i]);
            prop_assert_eq!(sh.labels[i], labels[src]);
        }
        let (x2, y2) = sh.restore().unwrap();
        prop_assert_eq!(x2, x);
        prop_assert_eq!(y2, labels);
    }

    #[test]
    fn batches_cover_each_example_at_most_once(n in 1usize..300, per in 1usize..9, shards in 1usize..5, seed in any::<u64>(), drop_last: bool) {
        let total = per * shards;
        let batches: Vec<_> = batch_iter(n, total, shards, seed, drop_last).unwrap().collect();
        let mut seen = BTreeSet::new();
        for b in &batches {
            if drop_last {
                prop_assert_eq!(b.indices.len(), total);
            }
            for (i, &idx) in b.indices.iter().enumerate() {
                prop_assert!(seen.insert(idx));
                prop_assert_eq!(b.shards[i], i / per);
            }
        }
        let expect = if drop_last { n / total * total } else { n };
        prop_assert_eq!(seen.len(), expect);
    }

    #[test]
    fn combine_is_clean_plus_beta_weighted_adversarial(beta in 0.0f64..2.0, seed in any::<u64>(), present in 0u8..8) {
        let mk = |s: u64| GradSet { grads: vec![Some(Tensor::<f64>::randn(&[4], 1.0, s).into_data()), None] };
        let (c, nz, a) = (mk(seed), mk(seed ^ 1), mk(seed ^ 2));
        let bundle = GradientBundle {
            clean: (present & 1 != 0).then(|| c.clone()),
            noise: (present & 2 != 0).then(|| nz.clone()),
            adv: (present & 4 != 0).then(|| a.clone()),
        };
        let g = combine_gradients(&bundle, beta, 2);
        prop_assert!(g.grads[1].is_none());
        match &g.grads[0] {
            None => prop_assert_eq!(present, 0),
            Some(v) => {
                for j in 0..4 {
                    let mut want = 0.0;
                    if present & 1 != 0 { want += c.grads[0].as_ref().unwrap()[j]; }
                    if present & 2 != 0 { want += beta * nz.grads[0].as_ref().unwrap()[j]; }
                    if present & 4 != 0 { want += beta * a.grads[0].as_ref().unwrap()[j]; }
                    prop_assert!((v[j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
                }
            }
        }
    }

    #[test]
    fn update_speed_factors_equalize_effective_rates((a, b) in (2u64..12).prop_flat_map(|d| (1..d, Just(d)))) {
        let p = PAdv::new(a, b).unwrap();
        let (shared, main, aux) = update_speed_factors(p).unwrap();
        let pf = a as f64 / b as f64;
        // Main BN sees a (1 - p) share of the batch and Aux a p share; after
        // rescaling each moves at the shared rate.
        prop_assert_eq!(shared, 1.0);
        prop_assert!((main * (1.0 - pf) - 1.0).abs() < 1e-12);
        prop_assert!((aux * pf - 1.0).abs() < 1e-12);
        let mut g = GradSet { grads: vec![Some(vec![1.0f64]), Some(vec![1.0]), Some(vec![1.0]), None] };
        rescale_for_update_speed(&mut g, &[ParamRole::Shared, ParamRole::MainBn, ParamRole::AuxBn, ParamRole::AuxBn], p).unwrap();
        prop_assert_eq!(g.grads[0].as_ref().unwrap()[0], 1.0);
        prop_assert_eq!(g.grads[1].as_ref().unwrap()[0], main);
        prop_assert_eq!(g.grads[2].as_ref().unwrap()[0], aux);
        prop_assert!(g.grads[3].is_none());
    }

    #[test]
    fn round_half_down_matches_integer_oracle(a in 0u64..1_000_000, b in 1u64..10_000) {
        prop_assert_eq!(round_half_down(a, b), nearest_ties_down(a, b));
    }

    #[test]
    fn calibration_divides_by_relative_cost(t in 1usize..400, (a, b) in p_adv(), k in 1u32..4) {
        let p = PAdv::new(a, b).unwrap();
        // Cost factor (b + a·k) / b; epochs = t·b / (b + a·k).
        let (num, den) = (t as u64 * b, b + a * k as u64);
        let expect = nearest_ties_down(num, den);
        match calibrate_schedule(t, &[], p, k) {
            Ok(s) => prop_assert_eq!(s.effective_epochs as u64, expect),
            Err(_) => prop_assert_eq!(expect, 0),
        }
    }

    #[test]
    fn ledger_totals_are_sums_of_records(passes in prop::collection::vec((0u8..3, 1usize..200), 0..60)) {
        let mut ledger = CostLedger::new();
        let mut want = [0u64; 3];
        for (k, n) in &passes {
            let kind = [PassKind::Clean, PassKind::AttackNoise, PassKind::Adversarial][*k as usize];
            ledger.record_pass(kind, *n).unwrap();
            ledger.record_pass(PassKind::Eval, *n).unwrap();
            want[*k as usize] += *n as u64;
        }
        prop_assert_eq!(ledger.total(PassKind::Clean), want[0]);
        prop_assert_eq!(ledger.total(PassKind::AttackNoise), want[1]);
        prop_assert_eq!(ledger.total(PassKind::Adversarial), want[2]);
        prop_assert_eq!(ledger.training_total(), want.iter().sum::<u64>());
        let mut buf = Vec::new();
        ledger.write_jsonl(&mut buf).unwrap();
        prop_assert_eq!(CostLedger::read_jsonl(&buf[..]).unwrap(), ledger);
    }

    #[test]
    fn corruption_keeps_range_and_severity_zero_is_identity(seed in any::<u64>(), kind in 0usize..5, severity in 0u8..4, index in 0u64..100) {
        let img = Tensor::<f32>::uniform(&[2 * 6 * 6], 0.0, 1.0, seed).into_data();
        let spec = CorruptionSpec::new(CorruptionType::ALL[kind], severity, seed).unwrap();
        let out = corrupt(&img, (2, 6, 6), &spec, index).unwrap();
        prop_assert_eq!(out.len(), img.len());
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        if severity == 0 {
            prop_assert_eq!(&out, &img);
        }
        prop_assert_eq!(out, corrupt(&img, (2, 6, 6), &spec, index).unwrap());
        prop_assert!(CorruptionSpec::new(CorruptionType::ALL[kind], 4, seed).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Whole (tiny) runs: the measured ledger equals the cost formula for
    /// every mode and every epoch.
    #[test]
    fn run_ledgers_match_cost_formula(mode in 0u8..3, k in 1u32..3, p in prop::sample::select(vec![(1u64, 5u64), (1, 2), (0, 1), (1, 3)]), shards in 1usize..3, seed in any::<u64>()) {
        let mode = [Mode::Vanilla, Mode::Advprop, Mode::Fast][mode as usize];
        let mut cfg = ExperimentConfig::default();
        cfg.data.train_size = 256;
        cfg.data.test_size = 8;
        cfg.data.height = 8;
        cfg.data.width = 8;
        cfg.model.conv_channels = vec![4];
        cfg.train = TrainConfig {
            mode,
            base_epochs: 2,
            decay_epochs: vec![],
            calibrate_epochs: false,
            batch_size: 16,
            shards,
            shuffle_bn: shards > 1,
            sync_update_speed: p.0 != 0,
            p_adv: PAdv::new(p.0, p.1).unwrap(),
            seed,
            ..TrainConfig::default()
        };
        cfg.train.attack.steps = if mode == Mode::Advprop { k } else { 1 };
        if cfg.validate().is_err() {
            // p_adv · batch not divisible by the shards.
            return Ok(());
        }
        let (train, _) = load_data(&cfg).unwrap();
        let r = run_experiment::<f32>(&cfg, &train, None).unwrap();
        let n = r.trainer.ledger.epochs()[0].examples as usize;
        let report = audit(&r.trainer.ledger, &budget_model(&cfg, n)).unwrap();
        prop_assert!(report.matched, "{report:?}");
        let per_epoch = theoretical_cost(&budget_model(&cfg, n));
        prop_assert_eq!(
            Ratio::from_integer(r.trainer.ledger.training_total()),
            per_epoch * Ratio::from_integer(2)
        );
    }
}

#[test]
fn cost_formulas_on_fixed_examples() {
    let m = |mode, k, a, b| BudgetModel { mode, n: 1000, k, p_adv: PAdv::new(a, b).unwrap() };
    assert_eq!(theoretical_cost(&m(Mode::Vanilla, 1, 0, 1)), Ratio::from_integer(1000));
    assert_eq!(theoretical_cost(&m(Mode::Advprop, 5, 1, 1)), Ratio::from_integer(7000));
    assert_eq!(theoretical_cost(&m(Mode::Advprop, 1, 1, 1)), Ratio::from_integer(3000));
    assert_eq!(theoretical_cost(&m(Mode::Fast, 1, 1, 5)), Ratio::from_integer(1200));
    assert_eq!(theoretical_cost(&m(Mode::Fast, 1, 1, 3)), Ratio::new(4000, 3));
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let spec = NetSpec { height: 8, width: 8, conv_channels: vec![3], ..NetSpec::default() };
    let mut net = Network::<f64>::from_spec(&spec, 4).unwrap();
    let data = synth_patterns(8, 4, (1, 8, 8), &Default::default(), 1).unwrap();
    let (x, _) = data.slice::<f64>(0, 8).unwrap();
    for r in [advprop::nn::Route::Main, advprop::nn::Route::Aux] {
        net.forward_train(&x, None, None, r, advprop::nn::StatsMode::Batch, true).unwrap();
    }
    let velocity: Vec<Vec<f64>> = net.params().iter().map(|p| p.data().iter().map(|v| v * 0.5).collect()).collect();
    let ck = Checkpoint {
        header: CheckpointHeader {
            layers: net.descs(),
            epoch: 3,
            steps_done: 17,
            mode: Mode::Fast,
            seed: 9,
            classes: 10,
        },
        net,
        velocity,
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.bin");
    ck.save(&p).unwrap();
    let back = Checkpoint::<f64>::load(&p).unwrap();
    assert_eq!(back.net, ck.net);
    assert_eq!(back.velocity, ck.velocity);
    assert_eq!(back.header, ck.header);
    // Wrong precision and truncation are rejected.
    assert!(Checkpoint::<f32>::load(&p).is_err());
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(Checkpoint::<f64>::load(&p).is_err());
}
