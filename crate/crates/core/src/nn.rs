//! Layers, the dual batch-norm routing scheme, and the parameter registry.
//!
//! Every batch-norm layer in a [`Network`] is a [`DualBatchNorm`]: a Main
//! branch used for clean examples and an Aux branch used for noisy and
//! adversarial examples. A forward pass selects exactly one branch for every
//! layer via [`Route`], so mixed routing inside one pass cannot be expressed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, BnMode, Graph, NodeId};
use crate::rng::derive_seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Shared,
    MainBn,
    AuxBn,
}

impl ParamRole {
    pub fn code(self) -> u8 {
        match self {
            ParamRole::Shared => 0,
            ParamRole::MainBn => 1,
            ParamRole::AuxBn => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamRole::Shared),
            1 => Some(ParamRole::MainBn),
            2 => Some(ParamRole::AuxBn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Main,
    Aux,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    Batch,
    Running,
}

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Fraction `m` of the batch statistic mixed into the running value.
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            scale: Tensor::filled(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running ← (1 − m)·running + m·batch`. The variance fed in is the
    /// unbiased (m/(m−1)) estimate; it stays non-negative.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::of(self.momentum);
        let keep = T::one() - m;
        let correction = if stats.count > 1 {
            T::of(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (keep * *r + m * b * correction).max(T::zero());
        }
    }

    fn graph_mode(&self, stats_mode: StatsMode) -> BnMode<T> {
        match stats_mode {
            StatsMode::Batch => BnMode::Batch,
            StatsMode::Running => BnMode::Running {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
            },
        }
    }
}

/// Normalizes `x[n, c, ...]` with one batch-norm state, optionally folding
/// the observed batch statistics into the running values.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    stats_mode: StatsMode,
    update_running: bool,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xi, si, bi) = (g.leaf("x"), g.leaf("scale"), g.leaf("shift"));
    let y = g.batch_norm("bn", xi, si, bi, state.graph_mode(stats_mode), state.eps);
    g.forward(vec![
        (xi, x.clone()),
        (si, state.scale.clone()),
        (bi, state.shift.clone()),
    ])?;
    if update_running {
        state.update_running(g.batch_stats(y).expect("batch-norm node caches statistics"));
    }
    Ok(g.value(y).expect("evaluated").clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualBatchNorm<T> {
    pub main: BatchNormState<T>,
    pub aux: BatchNormState<T>,
}

impl<T: Scalar> DualBatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            main: BatchNormState::new(channels, momentum, eps),
            aux: BatchNormState::new(channels, momentum, eps),
        }
    }

    pub fn branch(&self, route: Route) -> &BatchNormState<T> {
        match route {
            Route::Main => &self.main,
            Route::Aux => &self.aux,
        }
    }

    pub fn branch_mut(&mut self, route: Route) -> &mut BatchNormState<T> {
        match route {
            Route::Main => &mut self.main,
            Route::Aux => &mut self.aux,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv {
        weight: Tensor<T>,
        bias: Tensor<T>,
        pad: usize,
    },
    Dense {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    DualBn(DualBatchNorm<T>),
    Relu,
    MeanPool {
        k: usize,
    },
    Flatten,
}

/// Structural description of a layer, enough to rebuild it with fresh values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        pad: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    DualBn {
        channels: usize,
        momentum: f64,
        eps: f64,
    },
    Relu,
    MeanPool {
        k: usize,
    },
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, pad: usize, seed: u64) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Layer::Conv {
            weight: Tensor::randn(
                &[out_channels, in_channels, kernel, kernel],
                (2.0 / fan_in).sqrt(),
                seed,
            ),
            bias: Tensor::zeros(&[out_channels]),
            pad,
        }
    }

    pub fn dense(inputs: usize, outputs: usize, seed: u64) -> Self {
        Layer::Dense {
            weight: Tensor::randn(&[outputs, inputs], (1.0 / inputs as f64).sqrt(), seed),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn dual_bn(channels: usize) -> Self {
        Layer::DualBn(DualBatchNorm::new(channels, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPS))
    }

    pub fn from_desc(desc: &LayerDesc, seed: u64) -> Self {
        match *desc {
            LayerDesc::Conv {
                in_channels,
                out_channels,
                kernel,
                pad,
            } => Layer::conv(in_channels, out_channels, kernel, pad, seed),
            LayerDesc::Dense { inputs, outputs } => Layer::dense(inputs, outputs, seed),
            LayerDesc::DualBn {
                channels,
                momentum,
                eps,
            } => Layer::DualBn(DualBatchNorm::new(channels, momentum, eps)),
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::MeanPool { k } => Layer::MeanPool { k },
            LayerDesc::Flatten => Layer::Flatten,
        }
    }

    pub fn desc(&self) -> LayerDesc {
        match self {
            Layer::Conv { weight, pad, .. } => LayerDesc::Conv {
                in_channels: weight.shape()[1],
                out_channels: weight.shape()[0],
                kernel: weight.shape()[2],
                pad: *pad,
            },
            Layer::Dense { weight, .. } => LayerDesc::Dense {
                inputs: weight.shape()[1],
                outputs: weight.shape()[0],
            },
            Layer::DualBn(bn) => LayerDesc::DualBn {
                channels: bn.main.channels(),
                momentum: bn.main.momentum,
                eps: bn.main.eps,
            },
            Layer::Relu => LayerDesc::Relu,
            Layer::MeanPool { k } => LayerDesc::MeanPool { k: *k },
            Layer::Flatten => LayerDesc::Flatten,
        }
    }
}

/// The desk-scale reference classifier:
/// `[conv3x3 → dual-BN → relu → pool2] × stages → flatten → dense`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub conv_channels: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            height: 16,
            width: 16,
            classes: 10,
            conv_channels: vec![8, 16],
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        }
    }
}

impl NetSpec {
    pub fn layers(&self) -> Result<Vec<LayerDesc>> {
        let stages = self.conv_channels.len();
        let div = 1usize << stages;
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::config(
                "model.conv_channels",
                format!(
                    "{}x{} input is not divisible by 2^{stages} pooling",
                    self.height, self.width
                ),
            ));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least 2 classes"));
        }
        let mut out = Vec::new();
        let mut ch = self.in_channels;
        for &c in &self.conv_channels {
            out.push(LayerDesc::Conv {
                in_channels: ch,
                out_channels: c,
                kernel: 3,
                pad: 1,
            });
            out.push(LayerDesc::DualBn {
                channels: c,
                momentum: self.bn_momentum,
                eps: self.bn_eps,
            });
            out.push(LayerDesc::Relu);
            out.push(LayerDesc::MeanPool { k: 2 });
            ch = c;
        }
        out.push(LayerDesc::Flatten);
        out.push(LayerDesc::Dense {
            inputs: ch * (self.height / div) * (self.width / div),
            outputs: self.classes,
        });
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn from_descs(descs: &[LayerDesc], seed: u64) -> Self {
        let layers = descs
            .iter()
            .enumerate()
            .map(|(i, d)| Layer::from_desc(d, derive_seed(seed, i as u64)))
            .collect();
        Self { layers }
    }

    pub fn from_spec(spec: &NetSpec, seed: u64) -> Result<Self> {
        Ok(Self::from_descs(&spec.layers()?, seed))
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn descs(&self) -> Vec<LayerDesc> {
        self.layers.iter().map(Layer::desc).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let cast_bn = |s: &BatchNormState<T>| BatchNormState {
            scale: s.scale.cast(),
            shift: s.shift.cast(),
            running_mean: s.running_mean.iter().map(|v| U::of(v.as_f64())).collect(),
            running_var: s.running_var.iter().map(|v| U::of(v.as_f64())).collect(),
            momentum: s.momentum,
            eps: s.eps,
        };
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { weight, bias, pad } => Layer::Conv {
                    weight: weight.cast(),
                    bias: bias.cast(),
                    pad: *pad,
                },
                Layer::Dense { weight, bias } => Layer::Dense {
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::DualBn(bn) => Layer::DualBn(DualBatchNorm {
                    main: cast_bn(&bn.main),
                    aux: cast_bn(&bn.aux),
                }),
                Layer::Relu => Layer::Relu,
                Layer::MeanPool { k } => Layer::MeanPool { k: *k },
                Layer::Flatten => Layer::Flatten,
            })
            .collect();
        Network { layers }
    }

    /// Registry entries in canonical order; gradients and optimizer state
    /// are aligned to this order.
    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut push = |name: String, role, t: &Tensor<T>| {
                out.push(ParamInfo {
                    name,
                    role,
                    shape: t.shape().to_vec(),
                })
            };
            match layer {
                Layer::Conv { weight, bias, .. } => {
                    push(format!("{i}.conv.weight"), ParamRole::Shared, weight);
                    push(format!("{i}.conv.bias"), ParamRole::Shared, bias);
                }
                Layer::Dense { weight, bias } => {
                    push(format!("{i}.dense.weight"), ParamRole::Shared, weight);
                    push(format!("{i}.dense.bias"), ParamRole::Shared, bias);
                }
                Layer::DualBn(bn) => {
                    push(format!("{i}.bn.main.scale"), ParamRole::MainBn, &bn.main.scale);
                    push(format!("{i}.bn.main.shift"), ParamRole::MainBn, &bn.main.shift);
                    push(format!("{i}.bn.aux.scale"), ParamRole::AuxBn, &bn.aux.scale);
                    push(format!("{i}.bn.aux.shift"), ParamRole::AuxBn, &bn.aux.shift);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::DualBn(bn) => {
                    out.extend([&bn.main.scale, &bn.main.shift, &bn.aux.scale, &bn.aux.shift]);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::DualBn(bn) => {
                    let DualBatchNorm { main, aux } = bn;
                    out.extend([&mut main.scale, &mut main.shift, &mut aux.scale, &mut aux.shift]);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn dual_bns(&self) -> impl Iterator<Item = &DualBatchNorm<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::DualBn(bn) => Some(bn),
            _ => None,
        })
    }

    /// Pure forward pass; never touches running statistics.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        delta: Option<&Tensor<T>>,
        labels: Option<&[usize]>,
        route: Route,
        stats_mode: StatsMode,
    ) -> Result<Pass<T>> {
        let mut g = Graph::new();
        let mut bindings = Vec::new();
        let input = g.leaf("input");
        bindings.push((input, x.clone()));
        let (delta_leaf, mut h) = match delta {
            Some(d) => {
                let dl = g.leaf("delta");
                bindings.push((dl, d.clone()));
                (Some(dl), g.add("input+delta", input, dl))
            }
            None => (None, input),
        };

        let n_params = self.params().len();
        let mut param_leaves = vec![None; n_params];
        let mut next_param = 0usize;
        let mut bn_nodes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { weight, bias, pad } => {
                    let w = g.leaf(format!("{i}.conv.weight"));
                    let b = g.leaf(format!("{i}.conv.bias"));
                    bindings.push((w, weight.clone()));
                    bindings.push((b, bias.clone()));
                    param_leaves[next_param] = Some(w);
                    param_leaves[next_param + 1] = Some(b);
                    next_param += 2;
                    h = g.conv2d(format!("{i}.conv"), h, w, b, *pad);
                }
                Layer::Dense { weight, bias } => {
                    let w = g.leaf(format!("{i}.dense.weight"));
                    let b = g.leaf(format!("{i}.dense.bias"));
                    bindings.push((w, weight.clone()));
                    bindings.push((b, bias.clone()));
                    param_leaves[next_param] = Some(w);
                    param_leaves[next_param + 1] = Some(b);
                    next_param += 2;
                    h = g.dense(format!("{i}.dense"), h, w, b);
                }
                Layer::DualBn(bn) => {
                    let state = bn.branch(route);
                    let tag = match route {
                        Route::Main => "main",
                        Route::Aux => "aux",
                    };
                    let s = g.leaf(format!("{i}.bn.{tag}.scale"));
                    let b = g.leaf(format!("{i}.bn.{tag}.shift"));
                    bindings.push((s, state.scale.clone()));
                    bindings.push((b, state.shift.clone()));
                    let offset = match route {
                        Route::Main => 0,
                        Route::Aux => 2,
                    };
                    param_leaves[next_param + offset] = Some(s);
                    param_leaves[next_param + offset + 1] = Some(b);
                    next_param += 4;
                    h = g.batch_norm(
                        format!("{i}.bn.{tag}"),
                        h,
                        s,
                        b,
                        state.graph_mode(stats_mode),
                        state.eps,
                    );
                    bn_nodes.push((i, h));
                }
                Layer::Relu => h = g.relu(format!("{i}.relu"), h),
                Layer::MeanPool { k } => h = g.mean_pool(format!("{i}.pool"), h, *k),
                Layer::Flatten => h = g.flatten(format!("{i}.flatten"), h),
            }
        }
        let logits = h;
        let loss = labels.map(|l| g.softmax_cross_entropy("loss", logits, l.to_vec()));
        g.forward(bindings)?;
        Ok(Pass {
            graph: g,
            input,
            delta: delta_leaf,
            logits,
            loss,
            param_leaves,
            bn_nodes,
            route,
            stats_mode,
        })
    }

    /// Folds the batch statistics observed by `pass` into the running
    /// statistics of the branch the pass was routed through.
    pub fn commit_running_stats(&mut self, pass: &Pass<T>) {
        for &(layer, node) in &pass.bn_nodes {
            if let Layer::DualBn(bn) = &mut self.layers[layer] {
                let stats = pass
                    .graph
                    .batch_stats(node)
                    .expect("batch-norm node caches statistics");
                bn.branch_mut(pass.route).update_running(stats);
            }
        }
    }

    /// Forward pass that optionally updates the routed branch's running
    /// statistics.
    pub fn forward_train(
        &mut self,
        x: &Tensor<T>,
        delta: Option<&Tensor<T>>,
        labels: Option<&[usize]>,
        route: Route,
        stats_mode: StatsMode,
        update_running: bool,
    ) -> Result<Pass<T>> {
        let pass = self.forward(x, delta, labels, route, stats_mode)?;
        if update_running {
            self.commit_running_stats(&pass);
        }
        Ok(pass)
    }

    /// Inference: Main branch, running statistics.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self
            .forward(x, None, None, Route::Main, StatsMode::Running)?
            .predictions())
    }
}

/// `network_forward` as a free function.
pub fn network_forward<T: Scalar>(
    net: &mut Network<T>,
    x: &Tensor<T>,
    labels: Option<&[usize]>,
    route: Route,
    stats_mode: StatsMode,
    update_running: bool,
) -> Result<Pass<T>> {
    net.forward_train(x, None, labels, route, stats_mode, update_running)
}

pub fn param_roles<T: Scalar>(net: &Network<T>) -> Vec<ParamRole> {
    net.param_info().into_iter().map(|p| p.role).collect()
}

/// Gradients aligned with a network's parameter registry. `None` marks a
/// parameter the pass never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet<T> {
    pub grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradSet<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn touched(&self, i: usize) -> bool {
        self.grads[i].is_some()
    }

    /// `self += alpha · other`; untouched entries of `other` contribute nothing.
    pub fn add_scaled(&mut self, other: &GradSet<T>, alpha: f64) {
        let a = T::of(alpha);
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => d.iter_mut().zip(src).for_each(|(x, &y)| *x += a * y),
                None => *dst = Some(src.iter().map(|&y| a * y).collect()),
            }
        }
    }

    pub fn scale_entry(&mut self, i: usize, factor: f64) {
        if let Some(g) = &mut self.grads[i] {
            let f = T::of(factor);
            g.iter_mut().for_each(|v| *v *= f);
        }
    }

    /// Mean of equally weighted gradient sets (e.g. one per shard).
    pub fn mean(sets: &[GradSet<T>]) -> Option<GradSet<T>> {
        let first = sets.first()?;
        let mut acc = GradSet::empty(first.len());
        for s in sets {
            acc.add_scaled(s, 1.0);
        }
        let k = 1.0 / sets.len() as f64;
        for i in 0..acc.len() {
            acc.scale_entry(i, k);
        }
        Some(acc)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Want {
    pub params: bool,
    pub delta: bool,
    pub input: bool,
}

#[derive(Debug, Clone)]
pub struct PassGrads<T> {
    pub params: Option<GradSet<T>>,
    pub delta: Option<Tensor<T>>,
    pub input: Option<Tensor<T>>,
    pub visited: usize,
}

/// A forward-evaluated network graph, ready for backward.
#[derive(Debug, Clone)]
pub struct Pass<T> {
    pub graph: Graph<T>,
    pub input: NodeId,
    pub delta: Option<NodeId>,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    param_leaves: Vec<Option<NodeId>>,
    bn_nodes: Vec<(usize, NodeId)>,
    pub route: Route,
    pub stats_mode: StatsMode,
}

impl<T: Scalar> Pass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.graph.value(self.logits).expect("forwarded")
    }

    pub fn loss_value(&self) -> Option<T> {
        self.loss
            .map(|l| self.graph.value(l).expect("forwarded").data()[0])
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(self.logits())
    }

    pub fn correct(&self, labels: &[usize]) -> usize {
        self.predictions()
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count()
    }

    /// One backward traversal from the loss yielding every requested
    /// gradient family at once.
    pub fn backward(&mut self, want: Want) -> Result<PassGrads<T>> {
        let loss = self
            .loss
            .ok_or_else(|| Error::Invalid("pass was built without labels".into()))?;
        let mut wrt = Vec::new();
        if want.params {
            wrt.extend(self.param_leaves.iter().flatten().copied());
        }
        if want.delta {
            wrt.push(
                self.delta
                    .ok_or_else(|| Error::Invalid("pass has no perturbation leaf".into()))?,
            );
        }
        if want.input {
            wrt.push(self.input);
        }
        let mut grads = self.graph.backward(loss, &wrt)?;
        let params = want.params.then(|| GradSet {
            grads: self
                .param_leaves
                .iter()
                .map(|leaf| leaf.map(|id| grads.take(id).expect("requested").into_data()))
                .collect(),
        });
        let delta = if want.delta {
            grads.take(self.delta.expect("checked"))
        } else {
            None
        };
        let input = if want.input {
            grads.take(self.input)
        } else {
            None
        };
        Ok(PassGrads {
            params,
            delta,
            input,
            visited: grads.visited,
        })
    }
}

pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let cols = t.row_len();
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
