//! Reverse-mode automatic differentiation over a fixed set of primitives.
//!
//! A [`Graph`] is built symbolically (leaves plus primitive nodes in
//! topological order), evaluated by [`Graph::forward`] with concrete leaf
//! bindings, and differentiated by [`Graph::backward`]. A single backward
//! traversal can return gradients for any subset of leaves at once, which is
//! what lets an attack reuse the parameter gradient of its own pass.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Normalization statistics used by a batch-norm node.
#[derive(Debug, Clone)]
pub enum BnMode<T> {
    /// Mini-batch mean and (biased) variance.
    Batch,
    /// Stored running statistics.
    Running { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    /// `x[n, in] · w[out, in]^T + b[out]`
    Dense,
    /// Stride-1 cross-correlation, `x[n, c, h, w]`, `w[o, c, k, k]`, `b[o]`.
    Conv2d { pad: usize },
    Relu,
    Add,
    Scale(f64),
    Flatten,
    /// Non-overlapping `k × k` average pooling.
    MeanPool { k: usize },
    /// Per-channel normalization of `x[n, c, ...]` with affine `scale[c]`, `shift[c]`.
    BatchNorm { mode: BnMode<T>, eps: f64 },
    /// Mean softmax cross-entropy of `logits[n, classes]`.
    SoftmaxCrossEntropy { labels: Vec<usize> },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Dense => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Flatten => "flatten",
            Op::MeanPool { .. } => "mean_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node<T> {
    pub name: String,
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
}

/// Per-channel statistics observed by a batch-norm node during forward.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (1/m) variance.
    pub var: Vec<T>,
    /// Values per channel, `n * spatial`.
    pub count: usize,
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Bn {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        stats: BatchStats<T>,
    },
    Softmax {
        probs: Vec<T>,
    },
}

/// Gradients returned by one backward traversal.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    entries: Vec<(NodeId, Tensor<T>)>,
    /// Nodes whose adjoint was propagated.
    pub visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        let pos = self.entries.iter().position(|(n, _)| *n == id)?;
        Some(self.entries.swap_remove(pos).1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    values: Vec<Option<Tensor<T>>>,
    caches: Vec<Option<Cache<T>>>,
    forwarded: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            caches: Vec::new(),
            forwarded: false,
        }
    }

    fn push(&mut self, name: impl Into<String>, op: Op<T>, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        debug_assert!(inputs.iter().all(|i| i.0 < id));
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs,
        });
        self.values.push(None);
        self.caches.push(None);
        self.forwarded = false;
        NodeId(id)
    }

    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(name, Op::Leaf, vec![])
    }

    pub fn dense(&mut self, name: impl Into<String>, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::Dense, vec![x, w, b])
    }

    pub fn conv2d(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
    ) -> NodeId {
        self.push(name, Op::Conv2d { pad }, vec![x, w, b])
    }

    pub fn relu(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::Relu, vec![x])
    }

    pub fn add(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::Add, vec![a, b])
    }

    pub fn scale(&mut self, name: impl Into<String>, x: NodeId, factor: f64) -> NodeId {
        self.push(name, Op::Scale(factor), vec![x])
    }

    pub fn flatten(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::Flatten, vec![x])
    }

    pub fn mean_pool(&mut self, name: impl Into<String>, x: NodeId, k: usize) -> NodeId {
        self.push(name, Op::MeanPool { k }, vec![x])
    }

    pub fn batch_norm(
        &mut self,
        name: impl Into<String>,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        mode: BnMode<T>,
        eps: f64,
    ) -> NodeId {
        self.push(name, Op::BatchNorm { mode, eps }, vec![x, scale, shift])
    }

    pub fn softmax_cross_entropy(
        &mut self,
        name: impl Into<String>,
        logits: NodeId,
        labels: Vec<usize>,
    ) -> NodeId {
        self.push(name, Op::SoftmaxCrossEntropy { labels }, vec![logits])
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| (NodeId(i), n.name.as_str()))
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values.get(id.0).and_then(|v| v.as_ref())
    }

    pub fn is_forwarded(&self) -> bool {
        self.forwarded
    }

    /// Statistics observed by a batch-norm node in the last forward.
    pub fn batch_stats(&self, id: NodeId) -> Option<&BatchStats<T>> {
        match self.caches.get(id.0)? {
            Some(Cache::Bn { stats, .. }) => Some(stats),
            _ => None,
        }
    }

    /// Binds every leaf and evaluates all nodes in order.
    pub fn forward(&mut self, bindings: Vec<(NodeId, Tensor<T>)>) -> Result<()> {
        self.forwarded = false;
        for v in self.values.iter_mut() {
            *v = None;
        }
        for c in self.caches.iter_mut() {
            *c = None;
        }
        for (id, t) in bindings {
            match self.nodes.get(id.0) {
                Some(n) if matches!(n.op, Op::Leaf) => self.values[id.0] = Some(t),
                _ => return Err(Error::NotALeaf(id.0)),
            }
        }
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                match &self.values[i] {
                    None => return Err(Error::UnboundLeaf(node.name.clone())),
                    Some(t) if !t.is_finite() => {
                        return Err(Error::NonFinite {
                            node: node.name.clone(),
                            id: i,
                        })
                    }
                    Some(_) => continue,
                }
            }
            let (out, cache) = self.eval_node(i)?;
            if !out.is_finite() {
                return Err(Error::NonFinite {
                    node: self.nodes[i].name.clone(),
                    id: i,
                });
            }
            self.values[i] = Some(out);
            self.caches[i] = Some(cache);
        }
        self.forwarded = true;
        Ok(())
    }

    fn input(&self, i: usize, k: usize) -> &Tensor<T> {
        self.values[self.nodes[i].inputs[k].0]
            .as_ref()
            .expect("inputs evaluated before their consumers")
    }

    fn mismatch(&self, i: usize, detail: String) -> Error {
        Error::ShapeMismatch {
            node: format!("{} ({})", self.nodes[i].name, self.nodes[i].op.kind()),
            detail,
        }
    }

    fn eval_node(&self, i: usize) -> Result<(Tensor<T>, Cache<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!("leaves are bound, not evaluated"),
            Op::Dense => {
                let (x, w, b) = (self.input(i, 0), self.input(i, 1), self.input(i, 2));
                if x.shape().len() != 2
                    || w.shape().len() != 2
                    || x.shape()[1] != w.shape()[1]
                    || b.shape() != [w.shape()[0]]
                {
                    return Err(self.mismatch(
                        i,
                        format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
                    ));
                }
                let (n, fan_in, out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let mut y = Vec::with_capacity(n * out);
                for r in 0..n {
                    let xr = &x.data()[r * fan_in..(r + 1) * fan_in];
                    for o in 0..out {
                        let wr = &w.data()[o * fan_in..(o + 1) * fan_in];
                        y.push(b.data()[o] + dot(xr, wr));
                    }
                }
                Ok((Tensor::new(&[n, out], y)?, Cache::None))
            }
            Op::Conv2d { pad } => {
                let (x, w, b) = (self.input(i, 0), self.input(i, 1), self.input(i, 2));
                let dims = ConvDims::infer(x.shape(), w.shape(), *pad)
                    .filter(|_| b.shape() == [w.shape()[0]])
                    .ok_or_else(|| {
                        self.mismatch(
                            i,
                            format!(
                                "x {:?}, w {:?}, b {:?}, pad {pad}",
                                x.shape(),
                                w.shape(),
                                b.shape()
                            ),
                        )
                    })?;
                let y = conv_forward(&dims, x.data(), w.data(), b.data());
                Ok((Tensor::new(&[dims.n, dims.o, dims.oh, dims.ow], y)?, Cache::None))
            }
            Op::Relu => {
                let x = self.input(i, 0);
                let y = x.data().iter().map(|&v| v.max(T::zero())).collect();
                Ok((Tensor::new(x.shape(), y)?, Cache::None))
            }
            Op::Add => {
                let (a, b) = (self.input(i, 0), self.input(i, 1));
                if a.shape() != b.shape() {
                    return Err(self.mismatch(i, format!("{:?} + {:?}", a.shape(), b.shape())));
                }
                let y = a.data().iter().zip(b.data()).map(|(&p, &q)| p + q).collect();
                Ok((Tensor::new(a.shape(), y)?, Cache::None))
            }
            Op::Scale(f) => {
                let x = self.input(i, 0);
                let f = T::of(*f);
                let y = x.data().iter().map(|&v| v * f).collect();
                Ok((Tensor::new(x.shape(), y)?, Cache::None))
            }
            Op::Flatten => {
                let x = self.input(i, 0);
                let shape = [x.batch(), x.row_len()];
                Ok((Tensor::new(&shape, x.data().to_vec())?, Cache::None))
            }
            Op::MeanPool { k } => {
                let x = self.input(i, 0);
                let s = x.shape();
                if s.len() != 4 || *k == 0 || s[2] % k != 0 || s[3] % k != 0 {
                    return Err(self.mismatch(i, format!("cannot pool {s:?} by {k}")));
                }
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::of(1.0 / (k * k) as f64);
                let mut y = vec![T::zero(); planes * oh * ow];
                for p in 0..planes {
                    let xp = &x.data()[p * h * w..(p + 1) * h * w];
                    let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
                    for r in 0..h {
                        for c in 0..w {
                            yp[(r / k) * ow + c / k] += xp[r * w + c];
                        }
                    }
                    for v in yp.iter_mut() {
                        *v *= inv;
                    }
                }
                Ok((Tensor::new(&[s[0], s[1], oh, ow], y)?, Cache::None))
            }
            Op::BatchNorm { mode, eps } => {
                let (x, scale, shift) = (self.input(i, 0), self.input(i, 1), self.input(i, 2));
                let s = x.shape();
                if s.len() < 2 || scale.shape() != [s[1]] || shift.shape() != [s[1]] {
                    return Err(self.mismatch(
                        i,
                        format!("x {s:?}, scale {:?}, shift {:?}", scale.shape(), shift.shape()),
                    ));
                }
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                if matches!(mode, BnMode::Batch) && n < 2 {
                    return Err(Error::DegenerateBatch(n));
                }
                if let BnMode::Running { mean, var } = mode {
                    if mean.len() != c || var.len() != c {
                        return Err(self.mismatch(i, "running statistics length".into()));
                    }
                }
                let stats = channel_stats(x.data(), n, c, spatial);
                let eps = T::of(*eps);
                let (center, spread): (&[T], &[T]) = match mode {
                    BnMode::Batch => (&stats.mean, &stats.var),
                    BnMode::Running { mean, var } => (mean, var),
                };
                let inv_std: Vec<T> = spread.iter().map(|&v| (v + eps).sqrt().recip()).collect();
                let mut xhat = vec![T::zero(); x.len()];
                let mut y = vec![T::zero(); x.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for j in off..off + spatial {
                            let h = (x.data()[j] - center[ch]) * inv_std[ch];
                            xhat[j] = h;
                            y[j] = scale.data()[ch] * h + shift.data()[ch];
                        }
                    }
                }
                Ok((
                    Tensor::new(s, y)?,
                    Cache::Bn {
                        xhat,
                        inv_std,
                        stats,
                    },
                ))
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let z = self.input(i, 0);
                if z.shape().len() != 2 || z.shape()[0] != labels.len() {
                    return Err(self.mismatch(
                        i,
                        format!("logits {:?} with {} labels", z.shape(), labels.len()),
                    ));
                }
                let (n, classes) = (z.shape()[0], z.shape()[1]);
                if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                    return Err(self.mismatch(i, format!("label {bad} >= {classes} classes")));
                }
                let mut probs = vec![T::zero(); n * classes];
                let mut total = T::zero();
                for r in 0..n {
                    let zr = &z.data()[r * classes..(r + 1) * classes];
                    let m = zr.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for (p, &v) in probs[r * classes..].iter_mut().zip(zr) {
                        *p = (v - m).exp();
                        sum += *p;
                    }
                    for p in probs[r * classes..(r + 1) * classes].iter_mut() {
                        *p = *p / sum;
                    }
                    total += sum.ln() + m - zr[labels[r]];
                }
                let loss = total / T::of(n as f64);
                Ok((Tensor::scalar(loss), Cache::Softmax { probs }))
            }
        }
    }

    /// Backpropagates from a scalar `root` and returns gradients for `wrt`.
    pub fn backward(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Gradients<T>> {
        let shape = self
            .value(root)
            .ok_or(Error::BackwardBeforeForward)?
            .shape()
            .to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::ShapeMismatch {
                node: self.nodes[root.0].name.clone(),
                detail: format!("backward root must be scalar, got {shape:?}"),
            });
        }
        self.backward_from(root, Tensor::filled(&shape, T::one()), wrt)
    }

    /// Backpropagates an explicit upstream gradient `seed` from `root`.
    pub fn backward_from(
        &mut self,
        root: NodeId,
        seed: Tensor<T>,
        wrt: &[NodeId],
    ) -> Result<Gradients<T>> {
        if !self.forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        for id in wrt {
            match self.nodes.get(id.0) {
                Some(n) if matches!(n.op, Op::Leaf) => {}
                _ => return Err(Error::NotALeaf(id.0)),
            }
        }
        let root_shape = self.value(root).ok_or(Error::NotALeaf(root.0))?.shape();
        if seed.shape() != root_shape {
            return Err(Error::ShapeMismatch {
                node: self.nodes[root.0].name.clone(),
                detail: format!("seed {:?} vs value {:?}", seed.shape(), root_shape),
            });
        }

        let mut needs = vec![false; self.nodes.len()];
        for id in wrt {
            needs[id.0] = true;
        }
        for i in 0..self.nodes.len() {
            if !needs[i] {
                needs[i] = self.nodes[i].inputs.iter().any(|p| needs[p.0]);
            }
        }

        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(seed.into_data());
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            visited += 1;
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let want: Vec<bool> = inputs.iter().map(|p| needs[p.0]).collect();
            let grads = self.node_backward(i, &g, &want);
            for ((p, w), gi) in inputs.iter().zip(want).zip(grads) {
                if !w {
                    continue;
                }
                let gi = gi.expect("gradient produced for every wanted input");
                match &mut adj[p.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        let mut entries = Vec::with_capacity(wrt.len());
        for &id in wrt {
            let shape = self.values[id.0].as_ref().expect("leaf bound").shape().to_vec();
            let data = adj[id.0]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); shape.iter().product()]);
            if let Some(v) = self.values[id.0].as_mut() {
                v.grad = Some(data.clone());
            }
            entries.push((id, Tensor::new(&shape, data)?));
        }
        Ok(Gradients { entries, visited })
    }

    fn node_backward(&self, i: usize, g: &[T], want: &[bool]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let cache = self.caches[i].as_ref().expect("node evaluated");
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Dense => {
                let (x, w) = (self.input(i, 0), self.input(i, 1));
                let (n, fan_in, out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let dx = want[0].then(|| {
                    let mut dx = vec![T::zero(); n * fan_in];
                    for r in 0..n {
                        let dxr = &mut dx[r * fan_in..(r + 1) * fan_in];
                        for o in 0..out {
                            axpy(g[r * out + o], &w.data()[o * fan_in..(o + 1) * fan_in], dxr);
                        }
                    }
                    dx
                });
                let dw = want[1].then(|| {
                    let mut dw = vec![T::zero(); out * fan_in];
                    for r in 0..n {
                        let xr = &x.data()[r * fan_in..(r + 1) * fan_in];
                        for o in 0..out {
                            axpy(g[r * out + o], xr, &mut dw[o * fan_in..(o + 1) * fan_in]);
                        }
                    }
                    dw
                });
                let db = want[2].then(|| {
                    let mut db = vec![T::zero(); out];
                    for r in 0..n {
                        for o in 0..out {
                            db[o] += g[r * out + o];
                        }
                    }
                    db
                });
                vec![dx, dw, db]
            }
            Op::Conv2d { pad } => {
                let (x, w) = (self.input(i, 0), self.input(i, 1));
                let dims = ConvDims::infer(x.shape(), w.shape(), *pad).expect("checked in forward");
                let dx = want[0].then(|| conv_backward_input(&dims, g, w.data()));
                let dw = want[1].then(|| conv_backward_weight(&dims, g, x.data()));
                let db = want[2].then(|| {
                    let plane = dims.oh * dims.ow;
                    let mut db = vec![T::zero(); dims.o];
                    for b in 0..dims.n {
                        for (o, acc) in db.iter_mut().enumerate() {
                            let off = (b * dims.o + o) * plane;
                            *acc += g[off..off + plane].iter().copied().sum::<T>();
                        }
                    }
                    db
                });
                vec![dx, dw, db]
            }
            Op::Relu => {
                let x = self.input(i, 0);
                vec![Some(
                    x.data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Add => vec![want[0].then(|| g.to_vec()), want[1].then(|| g.to_vec())],
            Op::Scale(f) => {
                let f = T::of(*f);
                vec![Some(g.iter().map(|&v| v * f).collect())]
            }
            Op::Flatten => vec![Some(g.to_vec())],
            Op::MeanPool { k } => {
                let x = self.input(i, 0);
                let s = x.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::of(1.0 / (k * k) as f64);
                let mut dx = vec![T::zero(); x.len()];
                for p in 0..planes {
                    for r in 0..h {
                        for c in 0..w {
                            dx[p * h * w + r * w + c] = g[p * oh * ow + (r / k) * ow + c / k] * inv;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::BatchNorm { mode, .. } => {
                let (x, scale) = (self.input(i, 0), self.input(i, 1));
                let Cache::Bn { xhat, inv_std, .. } = cache else {
                    unreachable!()
                };
                let s = x.shape();
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for j in off..off + spatial {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                let dx = want[0].then(|| {
                    let mut dx = vec![T::zero(); x.len()];
                    let m = T::of((n * spatial) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * spatial;
                            let k = scale.data()[ch] * inv_std[ch];
                            for j in off..off + spatial {
                                dx[j] = match mode {
                                    BnMode::Batch => {
                                        k * (m * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]) / m
                                    }
                                    BnMode::Running { .. } => k * g[j],
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, want[1].then_some(sum_gx), want[2].then_some(sum_g)]
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let Cache::Softmax { probs } = cache else {
                    unreachable!()
                };
                let classes = probs.len() / labels.len();
                let k = g[0] / T::of(labels.len() as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * k).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dz[r * classes + l] -= k;
                }
                vec![Some(dz)]
            }
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&p, &q)| acc + p * q)
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, spatial: usize) -> BatchStats<T> {
    let count = n * spatial;
    let inv = T::of(1.0 / count as f64);
    let mut mean = vec![T::zero(); c];
    for b in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let off = (b * c + ch) * spatial;
            *m += x[off..off + spatial].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * spatial;
            var[ch] += x[off..off + spatial]
                .iter()
                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v *= inv);
    BatchStats { mean, var, count }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn infer(x: &[usize], w: &[usize], pad: usize) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] {
            return None;
        }
        let k = w[2];
        if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            return None;
        }
        Some(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            k,
            pad,
            oh: x[2] + 2 * pad - k + 1,
            ow: x[3] + 2 * pad - k + 1,
        })
    }

    /// Output rows `r` (or columns) for which input `r + tap - pad` is in bounds.
    #[inline]
    fn valid(&self, tap: usize, input: usize, output: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(tap);
        let hi = (input + self.pad).saturating_sub(tap).min(output);
        (lo, hi.max(lo))
    }
}

fn conv_forward<T: Scalar>(d: &ConvDims, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (plane_in, plane_out) = (d.h * d.w, d.oh * d.ow);
    let mut y = vec![T::zero(); d.n * d.o * plane_out];
    for nb in 0..d.n {
        for oc in 0..d.o {
            let out = &mut y[(nb * d.o + oc) * plane_out..][..plane_out];
            out.fill(b[oc]);
            for ic in 0..d.c {
                let xin = &x[(nb * d.c + ic) * plane_in..][..plane_in];
                for ky in 0..d.k {
                    let (r0, r1) = d.valid(ky, d.h, d.oh);
                    for kx in 0..d.k {
                        let wv = w[((oc * d.c + ic) * d.k + ky) * d.k + kx];
                        let (c0, c1) = d.valid(kx, d.w, d.ow);
                        for r in r0..r1 {
                            let ir = r + ky - d.pad;
                            let src = &xin[ir * d.w + c0 + kx - d.pad..][..c1 - c0];
                            axpy(wv, src, &mut out[r * d.ow + c0..r * d.ow + c1]);
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward_input<T: Scalar>(d: &ConvDims, g: &[T], w: &[T]) -> Vec<T> {
    let (plane_in, plane_out) = (d.h * d.w, d.oh * d.ow);
    let mut dx = vec![T::zero(); d.n * d.c * plane_in];
    for nb in 0..d.n {
        for oc in 0..d.o {
            let gp = &g[(nb * d.o + oc) * plane_out..][..plane_out];
            for ic in 0..d.c {
                let dxp = &mut dx[(nb * d.c + ic) * plane_in..][..plane_in];
                for ky in 0..d.k {
                    let (r0, r1) = d.valid(ky, d.h, d.oh);
                    for kx in 0..d.k {
                        let wv = w[((oc * d.c + ic) * d.k + ky) * d.k + kx];
                        let (c0, c1) = d.valid(kx, d.w, d.ow);
                        for r in r0..r1 {
                            let ir = r + ky - d.pad;
                            let dst = &mut dxp[ir * d.w + c0 + kx - d.pad..][..c1 - c0];
                            axpy(wv, &gp[r * d.ow + c0..r * d.ow + c1], dst);
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_backward_weight<T: Scalar>(d: &ConvDims, g: &[T], x: &[T]) -> Vec<T> {
    let (plane_in, plane_out) = (d.h * d.w, d.oh * d.ow);
    let mut dw = vec![T::zero(); d.o * d.c * d.k * d.k];
    for nb in 0..d.n {
        for oc in 0..d.o {
            let gp = &g[(nb * d.o + oc) * plane_out..][..plane_out];
            for ic in 0..d.c {
                let xin = &x[(nb * d.c + ic) * plane_in..][..plane_in];
                for ky in 0..d.k {
                    let (r0, r1) = d.valid(ky, d.h, d.oh);
                    for kx in 0..d.k {
                        let (c0, c1) = d.valid(kx, d.w, d.ow);
                        let mut acc = T::zero();
                        for r in r0..r1 {
                            let ir = r + ky - d.pad;
                            let src = &xin[ir * d.w + c0 + kx - d.pad..][..c1 - c0];
                            acc += dot(&gp[r * d.ow + c0..r * d.ow + c1], src);
                        }
                        dw[((oc * d.c + ic) * d.k + ky) * d.k + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut g = Graph::<f64>::new();
        let (x, w, b) = (g.leaf("x"), g.leaf("w"), g.leaf("b"));
        let y = g.dense("fc", x, w, b);
        let v = vec![0.5, -1.5, 2.0];
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        g.forward(vec![
            (x, t(&[1, 3], v.clone())),
            (w, t(&[3, 3], eye)),
            (b, Tensor::zeros(&[3])),
        ])
        .unwrap();
        assert_eq!(g.value(y).unwrap().data(), &v[..]);
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        for classes in [2usize, 5, 10] {
            let mut g = Graph::<f64>::new();
            let z = g.leaf("z");
            let l = g.softmax_cross_entropy("ce", z, vec![0, classes - 1]);
            g.forward(vec![(z, Tensor::filled(&[2, classes], 0.3))]).unwrap();
            let loss = g.value(l).unwrap().data()[0];
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_gradients() {
        // loss = sum(w * x) expressed as dense(x, w, 0) with one output.
        let mut g = Graph::<f64>::new();
        let (x, w, b) = (g.leaf("x"), g.leaf("w"), g.leaf("b"));
        let y = g.dense("fc", x, w, b);
        let xv = vec![1.0, -2.0, 3.0];
        let wv = vec![0.5, 0.25, -4.0];
        g.forward(vec![
            (x, t(&[1, 3], xv.clone())),
            (w, t(&[1, 3], wv.clone())),
            (b, Tensor::zeros(&[1])),
        ])
        .unwrap();
        let grads = g.backward(y, &[x, w]).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &xv[..]);
        assert_eq!(grads.get(x).unwrap().data(), &wv[..]);
    }

    #[test]
    fn backward_before_forward_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        let y = g.relu("r", x);
        assert!(matches!(
            g.backward(y, &[x]),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn non_leaf_wrt_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        let y = g.scale("s", x, 2.0);
        g.forward(vec![(x, Tensor::scalar(1.0))]).unwrap();
        assert!(matches!(g.backward(y, &[y]), Err(Error::NotALeaf(1))));
        assert!(matches!(g.backward(y, &[NodeId(9)]), Err(Error::NotALeaf(9))));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.leaf("a"), g.leaf("b"));
        g.add("joint_sum", a, b);
        let err = g
            .forward(vec![(a, Tensor::zeros(&[2])), (b, Tensor::zeros(&[3]))])
            .unwrap_err();
        match err {
            Error::ShapeMismatch { node, .. } => assert!(node.contains("joint_sum")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_activation_is_flagged() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        g.scale("blowup", x, f64::MAX);
        let err = g.forward(vec![(x, Tensor::scalar(10.0))]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { id: 1, .. }));
    }

    #[test]
    fn unbound_leaf_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("image");
        g.relu("r", x);
        assert!(matches!(g.forward(vec![]), Err(Error::UnboundLeaf(n)) if n == "image"));
    }

    #[test]
    fn batch_norm_rejects_single_example() {
        let mut g = Graph::<f64>::new();
        let (x, s, b) = (g.leaf("x"), g.leaf("s"), g.leaf("b"));
        g.batch_norm("bn", x, s, b, BnMode::Batch, 1e-5);
        let err = g
            .forward(vec![
                (x, Tensor::zeros(&[1, 2, 3, 3])),
                (s, Tensor::filled(&[2], 1.0)),
                (b, Tensor::zeros(&[2])),
            ])
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(1)));
    }

    #[test]
    fn conv_matches_naive_loop() {
        let x = Tensor::<f64>::randn(&[2, 3, 5, 4], 1.0, 1);
        let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, 2);
        let b = Tensor::<f64>::randn(&[4], 1.0, 3);
        for pad in [0usize, 1, 2] {
            let d = ConvDims::infer(x.shape(), w.shape(), pad).unwrap();
            let y = conv_forward(&d, x.data(), w.data(), b.data());
            for nb in 0..d.n {
                for o in 0..d.o {
                    for r in 0..d.oh {
                        for c in 0..d.ow {
                            let mut acc = b.data()[o];
                            for ic in 0..d.c {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let ir = r as isize + ky as isize - pad as isize;
                                        let jc = c as isize + kx as isize - pad as isize;
                                        if ir < 0 || jc < 0 || ir >= 5 || jc >= 4 {
                                            continue;
                                        }
                                        acc += w.data()[((o * 3 + ic) * 3 + ky) * 3 + kx]
                                            * x.data()
                                                [((nb * 3 + ic) * 5 + ir as usize) * 4 + jc as usize];
                                    }
                                }
                            }
                            let got = y[((nb * d.o + o) * d.oh + r) * d.ow + c];
                            assert!((got - acc).abs() < 1e-12, "pad {pad}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn backward_visits_each_needed_node_once() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        let a = g.relu("a", x);
        let b = g.scale("b", x, 3.0);
        let c = g.add("c", a, b);
        let d = g.add("d", c, a);
        let z = g.leaf("z");
        let e = g.add("e", d, z);
        g.forward(vec![(x, t(&[2], vec![1.0, -1.0])), (z, Tensor::zeros(&[2]))])
            .unwrap();
        let grads = g.backward_from(e, Tensor::filled(&[2], 1.0), &[x]).unwrap();
        // e, d, c, b, a, x; z is not needed.
        assert_eq!(grads.visited, 6);
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 3.0]);
    }
}
