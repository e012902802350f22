//! Two-pass oracle for the fused noise/attack pass.

use advprop::attack::{apply_perturbation, attack_with_grad_reuse, sample_init_noise};
use advprop::config::AttackConfig;
use advprop::ledger::{CostLedger, PassKind};
use advprop::nn::{GradSet, NetSpec, Network, Route, StatsMode, Want};
use advprop::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn net<T: Scalar>(channels: usize, hw: usize, classes: usize, widths: Vec<usize>, seed: u64) -> Network<T> {
    let spec = NetSpec {
        in_channels: channels,
        height: hw,
        width: hw,
        classes,
        conv_channels: widths,
        ..NetSpec::default()
    };
    Network::from_spec(&spec, seed).unwrap()
}

pub struct Oracle {
    pub grads: GradSet<f64>,
    pub delta: Tensor<f64>,
    pub loss: f64,
    pub net_after: Network<f64>,
}

/// Two independent passes: one for the parameter gradient, one for the
/// input-perturbation gradient, followed by an FGSM step written out here.
pub fn two_pass_oracle(net: &Network<f64>, x: &Tensor<f64>, y: &[usize], cfg: &AttackConfig, seed: u64) -> Oracle {
    let noise = if cfg.random_init {
        sample_init_noise::<f64>(x.shape(), cfg.epsilon, seed).unwrap()
    } else {
        Tensor::zeros(x.shape())
    };
    let mut p1 = net.forward(x, Some(&noise), Some(y), Route::Aux, StatsMode::Batch).unwrap();
    let grads = p1.backward(Want { params: true, ..Want::default() }).unwrap().params.unwrap();
    let mut p2 = net.forward(x, Some(&noise), Some(y), Route::Aux, StatsMode::Batch).unwrap();
    let g = p2.backward(Want { delta: true, ..Want::default() }).unwrap().delta.unwrap();
    let e = cfg.epsilon;
    let delta_data = g
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&gv, &n)| {
            let s = if gv > 0.0 {
                1.0
            } else if gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            (n + e * s).clamp(-e, e)
        })
        .collect();
    let mut net_after = net.clone();
    net_after.commit_running_stats(&p1);
    Oracle {
        grads,
        delta: Tensor::new(x.shape(), delta_data).unwrap(),
        loss: p1.loss_value().unwrap(),
        net_after,
    }
}

pub fn bits(t: &[f64]) -> Vec<u64> {
    t.iter().map(|v| v.to_bits()).collect()
}

/// One random fused-vs-oracle comparison; `Err` describes the first
/// mismatch.
pub fn random_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let channels = rng.random_range(1..=3);
    let hw = [4, 8][rng.random_range(0..2)];
    let classes = rng.random_range(2..=5);
    let widths = if rng.random_bool(0.5) { vec![rng.random_range(1..=4)] } else { vec![2, 3] };
    let n = rng.random_range(2..=6);
    let mut net = net::<f64>(channels, hw, classes, widths, rng.random());
    if rng.random_bool(0.5) {
        // Start from non-default Aux statistics.
        let warm = Tensor::randn(&[n, channels, hw, hw], 1.0, rng.random());
        net.forward_train(&warm, None, None, Route::Aux, StatsMode::Batch, true).unwrap();
    }
    let x = Tensor::uniform(&[n, channels, hw, hw], 0.0, 1.0, rng.random());
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let cfg = AttackConfig {
        epsilon: [1.0 / 255.0, 4.0 / 255.0, 0.1][rng.random_range(0..3)],
        random_init: rng.random_bool(0.7),
        ..AttackConfig::default()
    };
    let seed: u64 = rng.random();

    let oracle = two_pass_oracle(&net, &x, &y, &cfg, seed);
    let mut fused_net = net.clone();
    let mut ledger = CostLedger::new();
    let out = attack_with_grad_reuse(&mut fused_net, &x, &y, &cfg, seed, &mut ledger).map_err(|e| e.to_string())?;

    if out.noise_grads.grads.len() != oracle.grads.grads.len() {
        return Err("parameter counts differ".into());
    }
    for (i, (a, b)) in out.noise_grads.grads.iter().zip(&oracle.grads.grads).enumerate() {
        match (a, b) {
            (Some(a), Some(b)) if bits(a) == bits(b) => {}
            (None, None) => {}
            _ => return Err(format!("parameter {i} gradient differs")),
        }
    }
    if out.noise_loss.to_bits() != oracle.loss.to_bits() {
        return Err("loss differs".into());
    }
    let expected = apply_perturbation(&x, &oracle.delta, cfg.epsilon, false);
    if bits(out.x_adv.data()) != bits(expected.data()) {
        return Err("adversarial example differs".into());
    }
    if fused_net != oracle.net_after {
        return Err("running statistics differ".into());
    }
    if ledger.total(PassKind::AttackNoise) != n as u64 {
        return Err("ledger differs".into());
    }
    Ok(())
}
