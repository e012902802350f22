//! ℓ∞ sign-gradient attacks routed through the Aux batch-norm branch.

use rand::Rng;

use crate::config::AttackConfig;
use crate::error::{Error, Result};
use crate::ledger::{CostLedger, PassKind};
use crate::nn::{GradSet, Network, Route, StatsMode, Want};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Scalar, Tensor};

/// δ ~ U(−ε, ε), i.i.d. per element.
pub fn sample_init_noise<T: Scalar>(shape: &[usize], epsilon: f64, seed: u64) -> Result<Tensor<T>> {
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut t = Tensor::<T>::uniform(shape, -epsilon, epsilon, seed);
    let e = T::of(epsilon);
    t.data_mut().iter_mut().for_each(|v| *v = v.max(-e).min(e));
    Ok(t)
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `clip(δ + step·sign(g), −ε, ε)`; `sign(0) = 0`.
pub fn sign_step<T: Scalar>(g: &Tensor<T>, delta: &Tensor<T>, step: f64, epsilon: f64) -> Result<Tensor<T>> {
    if g.shape() != delta.shape() {
        return Err(Error::ShapeMismatch {
            node: "sign_step".into(),
            detail: format!("gradient {:?} vs perturbation {:?}", g.shape(), delta.shape()),
        });
    }
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient("attack input gradient".into()));
    }
    let (step, e) = (T::of(step), T::of(epsilon));
    let data = g
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&gv, &d)| (d + step * sign(gv)).max(-e).min(e))
        .collect();
    Tensor::new(delta.shape(), data)
}

/// One FGSM step of size ε from `delta`.
pub fn fgsm_step<T: Scalar>(g: &Tensor<T>, delta: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    sign_step(g, delta, epsilon, epsilon)
}

/// `x + δ`, nudged toward `x` wherever rounding would push the realized
/// perturbation past ε, and optionally clipped to `[0, 1]`.
pub fn apply_perturbation<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    epsilon: f64,
    clip_image: bool,
) -> Tensor<T> {
    let bound = T::of(epsilon).as_f64();
    let data = x
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&xv, &d)| {
            let mut v = xv + d;
            if clip_image {
                v = v.max(T::zero()).min(T::one());
            }
            while (v.as_f64() - xv.as_f64()).abs() > bound {
                let ulp = T::epsilon() * v.abs().max(T::min_positive_value());
                v = if v > xv { v - ulp } else { v + ulp };
            }
            v
        })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape as x")
}

/// Largest `|x_adv − x|` measured in f64.
pub fn linf_distance<T: Scalar>(x: &Tensor<T>, x_adv: &Tensor<T>) -> f64 {
    x.data()
        .iter()
        .zip(x_adv.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// A uniformly drawn wrong label for every example.
pub fn draw_targets(labels: &[usize], classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed);
    labels
        .iter()
        .map(|&y| (y + 1 + rng.random_range(0..classes - 1)) % classes)
        .collect()
}

#[derive(Debug, Clone)]
pub struct AttackOutcome<T> {
    pub x_adv: Tensor<T>,
    pub delta: Tensor<T>,
}

/// K-step projected sign-gradient attack through the Aux branch.
///
/// Untargeted attacks ascend the loss of the true labels; targeted attacks
/// descend the loss of uniformly drawn wrong labels. No running statistics
/// or parameters change. Each step records `|X|` attack units in `ledger`.
pub fn pgd_attack<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    classes: usize,
    seed: u64,
    ledger: &mut CostLedger,
) -> Result<AttackOutcome<T>> {
    cfg.validate()?;
    if labels.len() != x.batch() {
        return Err(Error::Invalid(format!(
            "{} labels for {} images",
            labels.len(),
            x.batch()
        )));
    }
    let mut delta = if cfg.random_init {
        sample_init_noise(x.shape(), cfg.epsilon, seed)?
    } else {
        Tensor::zeros(x.shape())
    };
    let targets;
    let (attack_labels, direction) = if cfg.targeted {
        targets = draw_targets(labels, classes, derive_seed(seed, 1));
        (&targets[..], -1.0)
    } else {
        (labels, 1.0)
    };
    let step = cfg.step_size() * direction;
    for _ in 0..cfg.steps {
        let mut pass = net.forward(x, Some(&delta), Some(attack_labels), Route::Aux, cfg.stats_mode)?;
        let g = pass
            .backward(Want {
                delta: true,
                ..Want::default()
            })?
            .delta
            .expect("delta gradient requested");
        ledger.record_pass(PassKind::AttackNoise, x.batch())?;
        delta = sign_step(&g, &delta, step, cfg.epsilon)?;
        if cfg.clip_image {
            let clipped = apply_perturbation(x, &delta, cfg.epsilon, true);
            let data = clipped
                .data()
                .iter()
                .zip(x.data())
                .map(|(&a, &b)| a - b)
                .collect();
            delta = Tensor::new(x.shape(), data)?;
        }
    }
    let x_adv = apply_perturbation(x, &delta, cfg.epsilon, cfg.clip_image);
    Ok(AttackOutcome { x_adv, delta })
}

#[derive(Debug, Clone)]
pub struct ReuseOutcome<T> {
    pub x_adv: Tensor<T>,
    /// Perturbation applied in the noise pass.
    pub noise: Tensor<T>,
    /// Parameter gradient of the noise pass (mean loss over the sub-batch).
    pub noise_grads: GradSet<T>,
    pub noise_loss: T,
    pub noise_correct: usize,
}

/// Single-step untargeted attack whose one backward pass also yields the
/// parameter gradient on `x + δ`.
///
/// The noise pass routes through Aux with batch statistics and updates the
/// Aux running statistics. It costs `|X|` pass units.
pub fn attack_with_grad_reuse<T: Scalar>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    ledger: &mut CostLedger,
) -> Result<ReuseOutcome<T>> {
    cfg.validate()?;
    if cfg.targeted {
        return Err(Error::config(
            "attack.targeted",
            "gradient reuse needs an untargeted attack on the true label",
        ));
    }
    if cfg.steps != 1 {
        return Err(Error::config("attack.steps", "gradient reuse needs steps = 1"));
    }
    let noise = if cfg.random_init {
        sample_init_noise(x.shape(), cfg.epsilon, seed)?
    } else {
        Tensor::zeros(x.shape())
    };
    let mut pass = net.forward(x, Some(&noise), Some(labels), Route::Aux, StatsMode::Batch)?;
    let noise_loss = pass.loss_value().expect("labels given");
    if !noise_loss.is_finite() {
        return Err(Error::NonFiniteLoss("noise"));
    }
    let noise_correct = pass.correct(labels);
    let grads = pass.backward(Want {
        params: true,
        delta: true,
        input: false,
    })?;
    let g_delta = grads.delta.expect("delta gradient requested");
    let delta = fgsm_step(&g_delta, &noise, cfg.epsilon)?;
    net.commit_running_stats(&pass);
    ledger.record_pass(PassKind::AttackNoise, x.batch())?;
    Ok(ReuseOutcome {
        x_adv: apply_perturbation(x, &delta, cfg.epsilon, cfg.clip_image),
        noise,
        noise_grads: grads.params.expect("params requested"),
        noise_loss,
        noise_correct,
    })
}
