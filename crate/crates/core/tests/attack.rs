//! Fused attack against a two-pass oracle, and the ℓ∞ bound of every
//! attack path.

mod common;

use advprop::attack::{apply_perturbation, attack_with_grad_reuse, linf_distance, pgd_attack, sample_init_noise};
use advprop::config::{AttackConfig, ExperimentConfig, Mode};
use advprop::data::synth_patterns;
use advprop::experiment::{load_data, new_trainer};
use advprop::ledger::{CostLedger, PassKind};
use advprop::nn::StatsMode;
use advprop::tensor::{Scalar, Tensor};
use common::fused::{net, random_case};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fused_attack_is_bitwise_equal_to_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..120 {
        if let Err(e) = random_case(&mut rng) {
            panic!("case {case}: {e}");
        }
    }
}

#[test]
fn fused_attack_rejects_targeted_and_multistep() {
    let mut n = net::<f64>(1, 4, 3, vec![2], 1);
    let x = Tensor::uniform(&[2, 1, 4, 4], 0.0, 1.0, 2);
    let mut ledger = CostLedger::new();
    for cfg in [
        AttackConfig { targeted: true, ..AttackConfig::default() },
        AttackConfig { steps: 2, ..AttackConfig::default() },
    ] {
        assert!(attack_with_grad_reuse(&mut n, &x, &[0, 1], &cfg, 0, &mut ledger).is_err());
    }
    assert!(ledger.records().is_empty());
}

fn bound_holds<T: Scalar>(x: &Tensor<T>, x_adv: &Tensor<T>, eps: f64) -> bool {
    // Measured in f64 against ε rounded to the working precision.
    linf_distance(x, x_adv) <= T::of(eps).as_f64()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn pgd_stays_within_epsilon(
        steps in 1u32..5,
        eps in 1e-4f64..0.3,
        random_init: bool,
        targeted: bool,
        clip_image: bool,
        running: bool,
        seed in any::<u64>(),
    ) {
        let cfg = AttackConfig {
            epsilon: eps,
            steps,
            random_init,
            targeted,
            clip_image,
            stats_mode: if running { StatsMode::Running } else { StatsMode::Batch },
            step_size: None,
        };
        let n32 = net::<f32>(1, 4, 3, vec![2], seed);
        let x32 = Tensor::<f32>::uniform(&[3, 1, 4, 4], 0.0, 1.0, seed ^ 1);
        let mut ledger = CostLedger::new();
        let out = pgd_attack(&n32, &x32, &[0, 1, 2], &cfg, 3, seed, &mut ledger).unwrap();
        prop_assert!(bound_holds(&x32, &out.x_adv, eps));
        let n64 = n32.cast::<f64>();
        let x64 = x32.cast::<f64>();
        let out = pgd_attack(&n64, &x64, &[0, 1, 2], &cfg, 3, seed, &mut ledger).unwrap();
        prop_assert!(bound_holds(&x64, &out.x_adv, eps));
        prop_assert_eq!(ledger.total(PassKind::AttackNoise), 2 * 3 * steps as u64);
    }

    #[test]
    fn fused_attack_stays_within_epsilon(eps in 1e-4f64..0.3, random_init: bool, clip_image: bool, seed in any::<u64>()) {
        let cfg = AttackConfig { epsilon: eps, random_init, clip_image, ..AttackConfig::default() };
        let mut n32 = net::<f32>(1, 4, 3, vec![2], seed);
        let x32 = Tensor::<f32>::uniform(&[4, 1, 4, 4], 0.0, 1.0, seed ^ 1);
        let mut ledger = CostLedger::new();
        let out = attack_with_grad_reuse(&mut n32, &x32, &[0, 1, 2, 0], &cfg, seed, &mut ledger).unwrap();
        prop_assert!(bound_holds(&x32, &out.x_adv, eps));
        prop_assert!(bound_holds(&Tensor::zeros(&[4, 1, 4, 4]), &out.noise, eps));
    }

    #[test]
    fn perturbation_never_exceeds_epsilon_after_rounding(
        xs in prop::collection::vec(0.0f32..1.0, 1..64),
        eps in 1e-6f64..0.5,
        seed in any::<u64>(),
    ) {
        let n = xs.len();
        let x = Tensor::new(&[n], xs).unwrap();
        let d = sample_init_noise::<f32>(&[n], eps, seed).unwrap();
        // Push every element to ±ε, the case most prone to rounding past it.
        let edge = Tensor::new(&[n], d.data().iter().map(|v| (eps as f32).copysign(*v)).collect()).unwrap();
        for clip in [false, true] {
            prop_assert!(bound_holds(&x, &apply_perturbation(&x, &edge, eps, clip), eps));
        }
    }
}

/// Every adversarial example generated during training, for every mode,
/// stays inside the ε-ball of its source image.
#[test]
fn training_attacks_respect_epsilon_across_configs() {
    let base = "base_epochs = 1\ndecay_epochs = []\ncalibrate_epochs = false\n\
                [data]\ntrain_size = 160\ntest_size = 16\n";
    let variants: &[&[(&str, &str)]] = &[
        &[("mode", "fast")],
        &[("mode", "fast"), ("shuffle_bn", "false"), ("attack.random_init", "false")],
        &[("mode", "fast"), ("p_adv", "1/2"), ("attack.clip_image", "true"), ("attack.epsilon", "0.05")],
        &[("mode", "advprop"), ("attack.steps", "3")],
        &[("mode", "advprop"), ("attack.steps", "1"), ("attack.targeted", "false")],
    ];
    for v in variants {
        let overrides: Vec<(String, String)> = v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let cfg = ExperimentConfig::from_toml_with(base, &overrides).unwrap();
        let (train, _) = load_data(&cfg).unwrap();
        let trainer = new_trainer::<f32>(&cfg, &train).unwrap();
        let total = cfg.train.total_batch();
        let (x, y) = train.slice::<f32>(0, total).unwrap();
        let eps = cfg.train.attack.epsilon;
        let mut ledger = CostLedger::new();
        match cfg.train.mode {
            Mode::Advprop => {
                let out = pgd_attack(&trainer.net, &x, &y, &cfg.train.attack, 10, 3, &mut ledger).unwrap();
                assert!(bound_holds(&x, &out.x_adv, eps), "{v:?}");
            }
            _ => {
                let mut n = trainer.net.clone();
                let out = attack_with_grad_reuse(&mut n, &x, &y, &cfg.train.attack, 3, &mut ledger).unwrap();
                assert!(bound_holds(&x, &out.x_adv, eps), "{v:?}");
            }
        }
    }
    // Real image data, larger batch, f64.
    let data = synth_patterns(64, 4, (1, 8, 8), &Default::default(), 5).unwrap();
    let (x, y) = data.slice::<f64>(0, 64).unwrap();
    let mut n = net::<f64>(1, 8, 4, vec![4], 9);
    let cfg = AttackConfig { epsilon: 8.0 / 255.0, ..AttackConfig::default() };
    let out = attack_with_grad_reuse(&mut n, &x, &y, &cfg, 1, &mut CostLedger::new()).unwrap();
    assert!(bound_holds(&x, &out.x_adv, cfg.epsilon));
}
