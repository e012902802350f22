//! Training steps for vanilla training, AdvProp, and Fast AdvProp.
//!
//! Every step computes its gradients on a scratch copy of the network and a
//! pending ledger, and commits both only if the whole step succeeds, so a
//! failed step leaves parameters, velocity, statistics and ledger as they
//! were.

use serde::{Deserialize, Serialize};

use crate::attack::{attack_with_grad_reuse, linf_distance, pgd_attack};
use crate::config::{Mode, PAdv, RescaleStage, TrainConfig};
use crate::error::{Error, Result};
use crate::ledger::{CostLedger, PassKind};
use crate::nn::{GradSet, Network, ParamRole, Route, StatsMode, Want};
use crate::optim::sgd_momentum_update;
use crate::rng::{derive_seed, permutation};
use crate::tensor::{Scalar, Tensor};

// Sub-stream tags for per-step seeds.
const SPLIT: u64 = 1;
const NOISE: u64 = 2;
const SHUFFLE: u64 = 3;
const ATTACK: u64 = 4;

/// A mini-batch partitioned into a clean part X₁ and an adversarial part X₂.
#[derive(Debug, Clone)]
pub struct BatchSplit<T> {
    pub clean: Option<(Tensor<T>, Vec<usize>)>,
    pub adv: Option<(Tensor<T>, Vec<usize>)>,
    /// Row indices of the original batch in each part.
    pub clean_rows: Vec<usize>,
    pub adv_rows: Vec<usize>,
}

/// Splits `x` so that exactly `p_adv·|X|` rows (chosen by `seed`) form X₂.
/// Both parts keep the original relative order.
pub fn split_batch<T: Scalar>(
    x: &Tensor<T>,
    labels: &[usize],
    p_adv: PAdv,
    seed: u64,
) -> Result<BatchSplit<T>> {
    let n = x.batch();
    if labels.len() != n {
        return Err(Error::Invalid(format!("{} labels for {n} images", labels.len())));
    }
    let scaled = p_adv.ratio() * num_rational::Ratio::from_integer(n as u64);
    if !scaled.is_integer() {
        return Err(Error::config(
            "p_adv",
            format!("{p_adv} of a {n}-example batch is not a whole number of examples"),
        ));
    }
    let m = scaled.to_integer() as usize;
    let mut adv_rows: Vec<usize> = permutation(n, seed).into_iter().take(m).collect();
    adv_rows.sort_unstable();
    let mut is_adv = vec![false; n];
    adv_rows.iter().for_each(|&r| is_adv[r] = true);
    let clean_rows: Vec<usize> = (0..n).filter(|&r| !is_adv[r]).collect();
    let part = |rows: &[usize]| -> Result<Option<(Tensor<T>, Vec<usize>)>> {
        if rows.is_empty() {
            return Ok(None);
        }
        Ok(Some((
            x.select_rows(rows)?,
            rows.iter().map(|&r| labels[r]).collect(),
        )))
    };
    Ok(BatchSplit {
        clean: part(&clean_rows)?,
        adv: part(&adv_rows)?,
        clean_rows,
        adv_rows,
    })
}

/// The clean/adversarial partition a Fast AdvProp step with `seed` uses.
pub fn fast_split<T: Scalar>(x: &Tensor<T>, labels: &[usize], cfg: &TrainConfig, seed: u64) -> Result<BatchSplit<T>> {
    split_batch(x, labels, cfg.p_adv, derive_seed(seed, SPLIT))
}

/// A joint (image, label) permutation across equally sized shards.
#[derive(Debug, Clone)]
pub struct ShardShuffle<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    /// Row `i` of the output is row `perm[i]` of the input.
    pub perm: Vec<usize>,
}

impl<T: Scalar> ShardShuffle<T> {
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }

    /// Restores the original order.
    pub fn restore(&self) -> Result<(Tensor<T>, Vec<usize>)> {
        let inv = self.inverse();
        Ok((
            self.x.select_rows(&inv)?,
            inv.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// Permutes examples globally so each of the `shards` consecutive chunks
/// receives examples generated under other shards' batch statistics.
pub fn shuffle_across_shards<T: Scalar>(
    x: &Tensor<T>,
    labels: &[usize],
    shards: usize,
    seed: u64,
) -> Result<ShardShuffle<T>> {
    if shards < 2 {
        return Err(Error::config("shuffle_bn", "shuffling needs at least 2 shards"));
    }
    let n = x.batch();
    if n % shards != 0 || labels.len() != n {
        return Err(Error::Invalid(format!(
            "{n} examples cannot be spread over {shards} equal shards"
        )));
    }
    let perm = permutation(n, seed);
    Ok(ShardShuffle {
        x: x.select_rows(&perm)?,
        labels: perm.iter().map(|&i| labels[i]).collect(),
        perm,
    })
}

/// Per-pass gradients of one step; absent passes contribute zero.
#[derive(Debug, Clone, Default)]
pub struct GradientBundle<T> {
    pub clean: Option<GradSet<T>>,
    pub noise: Option<GradSet<T>>,
    pub adv: Option<GradSet<T>>,
}

/// `g_clean + β·g_noise + β·g_adv`.
pub fn combine_gradients<T: Scalar>(bundle: &GradientBundle<T>, beta: f64, n_params: usize) -> GradSet<T> {
    let mut g = GradSet::empty(n_params);
    if let Some(c) = &bundle.clean {
        g.add_scaled(c, 1.0);
    }
    if let Some(n) = &bundle.noise {
        g.add_scaled(n, beta);
    }
    if let Some(a) = &bundle.adv {
        g.add_scaled(a, beta);
    }
    g
}

/// Per-role multipliers `(shared, main_bn, aux_bn)` that undo the
/// `1 : (1 − p_adv) : p_adv` update-speed imbalance.
pub fn update_speed_factors(p_adv: PAdv) -> Result<(f64, f64, f64)> {
    if p_adv.is_zero() || p_adv.is_one() {
        return Err(Error::config(
            "sync_update_speed",
            format!("cannot rescale with p_adv = {p_adv}"),
        ));
    }
    let p = p_adv.ratio();
    let one = num_rational::Ratio::from_integer(1u64);
    let main = one / (one - p);
    let aux = one / p;
    let f = |r: num_rational::Ratio<u64>| *r.numer() as f64 / *r.denom() as f64;
    Ok((1.0, f(main), f(aux)))
}

pub fn rescale_for_update_speed<T: Scalar>(
    g: &mut GradSet<T>,
    roles: &[ParamRole],
    p_adv: PAdv,
) -> Result<()> {
    let (_, main, aux) = update_speed_factors(p_adv)?;
    for (i, role) in roles.iter().enumerate() {
        match role {
            ParamRole::Shared => {}
            ParamRole::MainBn => g.scale_entry(i, main),
            ParamRole::AuxBn => g.scale_entry(i, aux),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PassStats {
    /// Sum over examples of the per-example loss.
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl PassStats {
    pub fn merge(&mut self, other: &PassStats) {
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.count += other.count;
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }

    pub fn mean_loss(&self) -> Option<f64> {
        (self.count > 0).then(|| self.loss_sum / self.count as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub clean: PassStats,
    pub noise: PassStats,
    pub adv: PassStats,
    /// Largest `|x_adv − x|` over the adversarial examples generated, in f64.
    pub max_perturbation: f64,
}

impl StepMetrics {
    pub fn merge(&mut self, other: &StepMetrics) {
        self.clean.merge(&other.clean);
        self.noise.merge(&other.noise);
        self.adv.merge(&other.adv);
        self.max_perturbation = self.max_perturbation.max(other.max_perturbation);
    }
}

/// Training passes over `shards` consecutive chunks of `x`, each with its
/// own batch statistics; returns the mean of the per-shard gradients.
pub fn sharded_pass<T: Scalar>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    route: Route,
    shards: usize,
    kind: PassKind,
    ledger: &mut CostLedger,
) -> Result<(GradSet<T>, PassStats)> {
    let chunks = x.chunk_rows(shards)?;
    let per = x.batch() / shards;
    let mut grads = Vec::with_capacity(shards);
    let mut stats = PassStats::default();
    for (s, chunk) in chunks.iter().enumerate() {
        let y = &labels[s * per..(s + 1) * per];
        let mut pass = net.forward_train(chunk, None, Some(y), route, StatsMode::Batch, true)?;
        let loss = pass.loss_value().expect("labels given");
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(kind_name(kind)));
        }
        stats.merge(&PassStats {
            loss_sum: loss.as_f64() * per as f64,
            correct: pass.correct(y),
            count: per,
        });
        grads.push(
            pass.backward(Want {
                params: true,
                ..Want::default()
            })?
            .params
            .expect("params requested"),
        );
        ledger.record_pass(kind, per)?;
    }
    Ok((GradSet::mean(&grads).expect("at least one shard"), stats))
}

fn kind_name(kind: PassKind) -> &'static str {
    match kind {
        PassKind::Clean => "clean",
        PassKind::AttackNoise => "noise",
        PassKind::Adversarial => "adversarial",
        PassKind::Eval => "eval",
    }
}

/// Final parameter gradient of one Fast AdvProp step, before the optimizer.
///
/// Order: split → fused noise/attack pass per shard on X₂ → optional shard
/// shuffle → adversarial pass on X_adv → clean pass on X₁ → β-combine →
/// update-speed rescale. Updates running statistics of `net` as it goes.
pub fn fast_advprop_gradients<T: Scalar>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    ledger: &mut CostLedger,
) -> Result<(GradSet<T>, StepMetrics)> {
    let roles: Vec<ParamRole> = net.param_info().into_iter().map(|p| p.role).collect();
    let n_params = roles.len();
    let split = fast_split(x, labels, cfg, seed)?;
    let mut metrics = StepMetrics::default();
    let mut bundle = GradientBundle::default();

    if let Some((x2, y2)) = &split.adv {
        let s = cfg.shards;
        let per = x2.batch() / s;
        let mut adv_parts = Vec::with_capacity(s);
        let mut noise_grads = Vec::with_capacity(s);
        for (i, chunk) in x2.chunk_rows(s)?.iter().enumerate() {
            let y = &y2[i * per..(i + 1) * per];
            let out = attack_with_grad_reuse(
                net,
                chunk,
                y,
                &cfg.attack,
                derive_seed(derive_seed(seed, NOISE), i as u64),
                ledger,
            )?;
            metrics.noise.merge(&PassStats {
                loss_sum: out.noise_loss.as_f64() * per as f64,
                correct: out.noise_correct,
                count: per,
            });
            metrics.max_perturbation = metrics.max_perturbation.max(linf_distance(chunk, &out.x_adv));
            noise_grads.push(out.noise_grads);
            adv_parts.push(out.x_adv);
        }
        bundle.noise = GradSet::mean(&noise_grads);
        let x_adv = Tensor::concat_rows(&adv_parts.iter().collect::<Vec<_>>())?;
        let (x_adv, y_adv) = if cfg.shuffle_bn {
            let sh = shuffle_across_shards(&x_adv, y2, s, derive_seed(seed, SHUFFLE))?;
            (sh.x, sh.labels)
        } else {
            (x_adv, y2.clone())
        };
        let (g_adv, st) = sharded_pass(net, &x_adv, &y_adv, Route::Aux, s, PassKind::Adversarial, ledger)?;
        bundle.adv = Some(g_adv);
        metrics.adv = st;
    }

    if let Some((x1, y1)) = &split.clean {
        let (g_clean, st) = sharded_pass(net, x1, y1, Route::Main, cfg.shards, PassKind::Clean, ledger)?;
        bundle.clean = Some(g_clean);
        metrics.clean = st;
    }

    let beta = cfg.effective_beta();
    let sync = cfg.sync_update_speed;
    let g = match cfg.rescale_stage {
        RescaleStage::AfterCombine => {
            let mut g = combine_gradients(&bundle, beta, n_params);
            if sync {
                rescale_for_update_speed(&mut g, &roles, cfg.p_adv)?;
            }
            g
        }
        RescaleStage::PerComponent => {
            if sync {
                for part in [&mut bundle.clean, &mut bundle.noise, &mut bundle.adv]
                    .into_iter()
                    .flatten()
                {
                    rescale_for_update_speed(part, &roles, cfg.p_adv)?;
                }
            }
            combine_gradients(&bundle, beta, n_params)
        }
    };
    Ok((g, metrics))
}

/// Gradient of one AdvProp step: PGD-K on all of X through Aux, then the
/// clean loss on Main plus the adversarial loss on Aux.
pub fn advprop_gradients<T: Scalar>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    classes: usize,
    seed: u64,
    ledger: &mut CostLedger,
) -> Result<(GradSet<T>, StepMetrics)> {
    let s = cfg.shards;
    let per = x.batch() / s;
    let mut adv_parts = Vec::with_capacity(s);
    let mut max_perturbation = 0.0f64;
    for (i, chunk) in x.chunk_rows(s)?.iter().enumerate() {
        let y = &labels[i * per..(i + 1) * per];
        let out = pgd_attack(
            net,
            chunk,
            y,
            &cfg.attack,
            classes,
            derive_seed(derive_seed(seed, ATTACK), i as u64),
            ledger,
        )?;
        max_perturbation = max_perturbation.max(linf_distance(chunk, &out.x_adv));
        adv_parts.push(out.x_adv);
    }
    let x_adv = Tensor::concat_rows(&adv_parts.iter().collect::<Vec<_>>())?;
    let mut metrics = StepMetrics {
        max_perturbation,
        ..StepMetrics::default()
    };
    let (g_clean, st) = sharded_pass(net, x, labels, Route::Main, s, PassKind::Clean, ledger)?;
    metrics.clean = st;
    let (g_adv, st) = sharded_pass(net, &x_adv, labels, Route::Aux, s, PassKind::Adversarial, ledger)?;
    metrics.adv = st;
    let bundle = GradientBundle {
        clean: Some(g_clean),
        noise: None,
        adv: Some(g_adv),
    };
    Ok((combine_gradients(&bundle, 1.0, net.params().len()), metrics))
}

pub fn vanilla_gradients<T: Scalar>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    ledger: &mut CostLedger,
) -> Result<(GradSet<T>, StepMetrics)> {
    let (g, st) = sharded_pass(net, x, labels, Route::Main, cfg.shards, PassKind::Clean, ledger)?;
    Ok((
        g,
        StepMetrics {
            clean: st,
            ..StepMetrics::default()
        },
    ))
}

/// Owns a network, its optimizer state and its cost ledger.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub net: Network<T>,
    pub velocity: Vec<Vec<T>>,
    pub ledger: CostLedger,
    pub classes: usize,
    pub steps_done: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, net: Network<T>, classes: usize) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::config("data.classes", "need at least 2 classes"));
        }
        let velocity = net.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Ok(Self {
            cfg,
            net,
            velocity,
            ledger: CostLedger::new(),
            classes,
            steps_done: 0,
        })
    }

    /// Runs one step of the configured mode at learning rate `lr`.
    pub fn step(&mut self, x: &Tensor<T>, labels: &[usize], lr: f64, seed: u64) -> Result<StepMetrics> {
        match self.cfg.mode {
            Mode::Vanilla => self.vanilla_step(x, labels, lr),
            Mode::Advprop => self.advprop_step(x, labels, lr, seed),
            Mode::Fast => self.fast_advprop_step(x, labels, lr, seed),
        }
    }

    pub fn vanilla_step(&mut self, x: &Tensor<T>, labels: &[usize], lr: f64) -> Result<StepMetrics> {
        let cfg = self.cfg.clone();
        self.atomic(lr, |net, ledger| vanilla_gradients(net, x, labels, &cfg, ledger))
    }

    pub fn advprop_step(&mut self, x: &Tensor<T>, labels: &[usize], lr: f64, seed: u64) -> Result<StepMetrics> {
        let cfg = self.cfg.clone();
        let classes = self.classes;
        self.atomic(lr, |net, ledger| {
            advprop_gradients(net, x, labels, &cfg, classes, seed, ledger)
        })
    }

    pub fn fast_advprop_step(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
        lr: f64,
        seed: u64,
    ) -> Result<StepMetrics> {
        let cfg = self.cfg.clone();
        self.atomic(lr, |net, ledger| {
            fast_advprop_gradients(net, x, labels, &cfg, seed, ledger)
        })
    }

    fn atomic<F>(&mut self, lr: f64, compute: F) -> Result<StepMetrics>
    where
        F: FnOnce(&mut Network<T>, &mut CostLedger) -> Result<(GradSet<T>, StepMetrics)>,
    {
        let mut net = self.net.clone();
        let mut pending = CostLedger::new();
        let (grads, metrics) = compute(&mut net, &mut pending)?;
        let mut velocity = self.velocity.clone();
        apply_sgd(&mut net, &grads, &mut velocity, &self.cfg, lr)?;
        if let Some(p) = net
            .param_info()
            .iter()
            .zip(net.params())
            .find(|(_, t)| !t.is_finite())
        {
            return Err(Error::NonFiniteParameter(p.0.name.clone()));
        }
        self.net = net;
        self.velocity = velocity;
        self.ledger.absorb(pending);
        self.steps_done += 1;
        Ok(metrics)
    }
}

/// SGD with momentum over every touched parameter. Untouched parameters
/// keep both value and velocity. All gradients are checked before any
/// parameter is written.
pub fn apply_sgd<T: Scalar>(
    net: &mut Network<T>,
    grads: &GradSet<T>,
    velocity: &mut [Vec<T>],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let info = net.param_info();
    for (p, g) in info.iter().zip(&grads.grads) {
        if let Some(g) = g {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    for (((param, g), v), p) in net
        .params_mut()
        .into_iter()
        .zip(&grads.grads)
        .zip(velocity.iter_mut())
        .zip(&info)
    {
        let Some(g) = g else { continue };
        let wd = if p.role == ParamRole::AuxBn && !cfg.aux_weight_decay {
            0.0
        } else {
            cfg.weight_decay
        };
        sgd_momentum_update(param.data_mut(), g, v, lr, cfg.momentum, wd)?;
    }
    Ok(())
}
