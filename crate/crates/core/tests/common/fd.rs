//! Central finite differences in f64 for single primitives and whole
//! networks.

use advprop::graph::{BnMode, Graph, NodeId};
use advprop::nn::{NetSpec, Network, Route, StatsMode, Want};
use advprop::tensor::Tensor;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Relative error with a small absolute floor so that gradients that are
/// zero up to rounding compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// A graph whose scalar output is a function of the named inputs.
pub struct Case {
    pub graph: Graph<f64>,
    pub root: NodeId,
    pub inputs: Vec<(NodeId, Tensor<f64>)>,
}

impl Case {
    pub fn eval(&mut self, inputs: &[(NodeId, Tensor<f64>)]) -> f64 {
        self.graph.forward(inputs.to_vec()).unwrap();
        self.graph.value(self.root).unwrap().data()[0]
    }

    /// Largest relative error over every element of every input.
    pub fn check(mut self) -> f64 {
        let inputs = self.inputs.clone();
        self.eval(&inputs);
        let ids: Vec<NodeId> = inputs.iter().map(|(id, _)| *id).collect();
        let grads = self.graph.backward(self.root, &ids).unwrap();
        let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.get(id).unwrap().clone()).collect();
        let mut worst = 0.0f64;
        for (k, (_, t)) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].1.data_mut()[j] += H;
                let mut minus = inputs.clone();
                minus[k].1.data_mut()[j] -= H;
                let fd = (self.eval(&plus) - self.eval(&minus)) / (2.0 * H);
                worst = worst.max(rel_err(analytic[k].data()[j], fd));
            }
        }
        worst
    }
}

/// `out` reduced to a scalar through a random projection and cross-entropy,
/// so every element of `out` reaches the loss with a distinct weight. The
/// projection is scaled to keep logits O(1) and the softmax unsaturated.
pub fn reduce(g: &mut Graph<f64>, out: NodeId, n: usize, width: usize, seed: u64) -> (NodeId, Vec<(NodeId, Tensor<f64>)>) {
    let flat = g.flatten("flat", out);
    let w = g.leaf("proj.w");
    let b = g.leaf("proj.b");
    let logits = g.dense("proj", flat, w, b);
    let labels = (0..n).map(|i| i % 3).collect();
    let root = g.softmax_cross_entropy("loss", logits, labels);
    let fixed = vec![
        (w, Tensor::randn(&[3, width], 1.0 / (width as f64).sqrt(), seed ^ 0x77)),
        (b, Tensor::randn(&[3], 0.1, seed ^ 0x78)),
    ];
    (root, fixed)
}

/// Inputs bounded away from zero so relu kinks never fall inside `±H`.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(shape, 1.0, seed);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    t
}

/// The projection leaves are checked along with the op's own inputs.
pub fn finish(g: Graph<f64>, root: NodeId, mut inputs: Vec<(NodeId, Tensor<f64>)>, fixed: Vec<(NodeId, Tensor<f64>)>) -> Case {
    inputs.extend(fixed);
    Case { graph: g, root, inputs }
}

pub fn dense_case(n: usize, i: usize, o: usize, seed: u64) -> Case {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let w = g.leaf("w");
    let b = g.leaf("b");
    let y = g.dense("dense", x, w, b);
    let (root, fixed) = reduce(&mut g, y, n, o, seed);
    let inputs = vec![
        (x, Tensor::randn(&[n, i], 1.0, seed)),
        (w, Tensor::randn(&[o, i], 0.5, seed + 1)),
        (b, Tensor::randn(&[o], 0.5, seed + 2)),
    ];
    finish(g, root, inputs, fixed)
}

pub fn conv_case(n: usize, c: usize, o: usize, hw: usize, k: usize, pad: usize, seed: u64) -> Case {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let w = g.leaf("w");
    let b = g.leaf("b");
    let y = g.conv2d("conv", x, w, b, pad);
    let out = hw + 2 * pad + 1 - k;
    let (root, fixed) = reduce(&mut g, y, n, o * out * out, seed);
    let inputs = vec![
        (x, Tensor::randn(&[n, c, hw, hw], 1.0, seed)),
        (w, Tensor::randn(&[o, c, k, k], 0.5, seed + 1)),
        (b, Tensor::randn(&[o], 0.5, seed + 2)),
    ];
    finish(g, root, inputs, fixed)
}

pub fn relu_case(n: usize, d: usize, seed: u64) -> Case {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let y = g.relu("relu", x);
    let (root, fixed) = reduce(&mut g, y, n, d, seed);
    finish(g, root, vec![(x, away_from_zero(&[n, d], seed))], fixed)
}

pub fn add_scale_case(n: usize, d: usize, factor: f64, seed: u64) -> Case {
    let mut g = Graph::new();
    let a = g.leaf("a");
    let b = g.leaf("b");
    let s = g.add("add", a, b);
    let y = g.scale("scale", s, factor);
    let (root, fixed) = reduce(&mut g, y, n, d, seed);
    let inputs = vec![
        (a, Tensor::randn(&[n, d], 1.0, seed)),
        (b, Tensor::randn(&[n, d], 1.0, seed + 1)),
    ];
    finish(g, root, inputs, fixed)
}

pub fn pool_case(n: usize, c: usize, hw: usize, k: usize, seed: u64) -> Case {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let y = g.mean_pool("pool", x, k);
    let out = hw / k;
    let (root, fixed) = reduce(&mut g, y, n, c * out * out, seed);
    finish(g, root, vec![(x, Tensor::randn(&[n, c, hw, hw], 1.0, seed))], fixed)
}

pub fn bn_case(n: usize, c: usize, hw: usize, running: bool, seed: u64) -> Case {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let s = g.leaf("scale");
    let b = g.leaf("shift");
    let mode = if running {
        BnMode::Running {
            mean: Tensor::<f64>::randn(&[c], 0.3, seed + 5).into_data(),
            var: Tensor::<f64>::uniform(&[c], 0.5, 2.0, seed + 6).into_data(),
        }
    } else {
        BnMode::Batch
    };
    let y = g.batch_norm("bn", x, s, b, mode, 1e-5);
    let (root, fixed) = reduce(&mut g, y, n, c * hw * hw, seed);
    let inputs = vec![
        (x, Tensor::randn(&[n, c, hw, hw], 1.0, seed)),
        (s, Tensor::uniform(&[c], 0.5, 1.5, seed + 1)),
        (b, Tensor::randn(&[c], 0.3, seed + 2)),
    ];
    finish(g, root, inputs, fixed)
}

pub fn ce_case(n: usize, classes: usize, seed: u64) -> Case {
    let mut g = Graph::new();
    let z = g.leaf("logits");
    let labels = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
    let root = g.softmax_cross_entropy("loss", z, labels);
    Case {
        graph: g,
        root,
        inputs: vec![(z, Tensor::randn(&[n, classes], 2.0, seed))],
    }
}

pub fn small_net(seed: u64) -> Network<f64> {
    let spec = NetSpec {
        in_channels: 1,
        height: 4,
        width: 4,
        classes: 3,
        conv_channels: vec![2, 3],
        ..NetSpec::default()
    };
    Network::from_spec(&spec, seed).unwrap()
}

pub fn net_loss(net: &Network<f64>, x: &Tensor<f64>, d: &Tensor<f64>, y: &[usize], route: Route, mode: StatsMode) -> f64 {
    net.forward(x, Some(d), Some(y), route, mode).unwrap().loss_value().unwrap()
}

/// Max relative error of the parameter, δ and input gradients of a full
/// network pass.
pub fn full_network_error(seed: u64, route: Route, mode: StatsMode) -> f64 {
    let mut net = small_net(seed);
    if mode == StatsMode::Running {
        // Non-trivial running statistics on both branches.
        let x0 = Tensor::randn(&[6, 1, 4, 4], 1.0, seed + 9);
        for r in [Route::Main, Route::Aux] {
            net.forward_train(&x0, None, None, r, StatsMode::Batch, true).unwrap();
        }
    }
    let x = Tensor::randn(&[4, 1, 4, 4], 1.0, seed + 1);
    let d = Tensor::randn(&[4, 1, 4, 4], 0.01, seed + 2);
    let y = [0, 1, 2, 1];
    let mut pass = net.forward(&x, Some(&d), Some(&y), route, mode).unwrap();
    let g = pass
        .backward(Want {
            params: true,
            delta: true,
            input: true,
        })
        .unwrap();
    let mut worst = 0.0f64;
    let params = g.params.unwrap();
    for (i, grad) in params.grads.iter().enumerate() {
        let len = net.params()[i].len();
        for j in 0..len {
            let bump = |h: f64| {
                let mut n2 = net.clone();
                n2.params_mut()[i].data_mut()[j] += h;
                net_loss(&n2, &x, &d, &y, route, mode)
            };
            let fd = (bump(H) - bump(-H)) / (2.0 * H);
            let a = grad.as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max(rel_err(a, fd));
        }
    }
    let gd = g.delta.unwrap();
    let gx = g.input.unwrap();
    for j in 0..x.len() {
        let fd_d = {
            let (mut p, mut m) = (d.clone(), d.clone());
            p.data_mut()[j] += H;
            m.data_mut()[j] -= H;
            (net_loss(&net, &x, &p, &y, route, mode) - net_loss(&net, &x, &m, &y, route, mode)) / (2.0 * H)
        };
        let fd_x = {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[j] += H;
            m.data_mut()[j] -= H;
            (net_loss(&net, &p, &d, &y, route, mode) - net_loss(&net, &m, &d, &y, route, mode)) / (2.0 * H)
        };
        worst = worst.max(rel_err(gd.data()[j], fd_d)).max(rel_err(gx.data()[j], fd_x));
    }
    worst
}

