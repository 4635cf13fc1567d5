//! Independent oracles and random model generators shared by the
//! integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod reference;

use segprune::graph::UpsampleSize;
use segprune::init::init_model;
use segprune::metrics::BinaryMask;
use segprune::{Conv2dAttrs, GraphBuilder, GraphDef, LayerKind, ModelGraph, Param};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Non-trivial batch-norm affine terms and running statistics, so inference
/// batch norm is not the identity.
pub fn randomize_bn(graph: &ModelGraph, seed: u64) -> ModelGraph {
    let mut r = rng(seed ^ 0xB17);
    let mut params = graph.params().clone();
    let mut buffers = graph.buffers().clone();
    for node in graph.nodes() {
        if let LayerKind::BatchNorm2d { .. } = node.kind {
            for (name, lo, hi) in [(node.weight_name(), 0.5f32, 1.5f32), (node.bias_name(), -0.5, 0.5)] {
                let p = params.get_mut(&name).unwrap();
                p.data.iter_mut().for_each(|v| *v = r.gen_range(lo..hi));
            }
            for (suffix, lo, hi) in [("running_mean", -0.5f32, 0.5f32), ("running_var", 0.5, 2.0)] {
                let p = buffers.get_mut(&format!("{}.{suffix}", node.id)).unwrap();
                p.data.iter_mut().for_each(|v| *v = r.gen_range(lo..hi));
            }
        }
    }
    graph.with_tensors(params, buffers).unwrap()
}

/// Rescales conv/linear filters by random per-filter factors so filter
/// norms are well separated.
pub fn spread_filters(graph: &ModelGraph, seed: u64) -> ModelGraph {
    let mut r = rng(seed ^ 0x5EED);
    let mut params: BTreeMap<String, Param> = graph.params().clone();
    for node in graph.nodes() {
        if let LayerKind::Conv2d(_) | LayerKind::Linear { .. } = node.kind {
            let p = params.get_mut(&node.weight_name()).unwrap();
            let filters = p.dims[0];
            let len = p.data.len() / filters;
            for f in 0..filters {
                let s: f32 = r.gen_range(0.2..2.0);
                p.data[f * len..(f + 1) * len].iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    graph.with_params(params).unwrap()
}

fn channels(r: &mut ChaCha8Rng) -> usize {
    *[2usize, 3, 4, 6, 8].choose(r).unwrap()
}

struct Gen<'a> {
    b: GraphBuilder,
    r: &'a mut ChaCha8Rng,
    n: usize,
    /// The current tensor is a concat of several producers; an identity
    /// skip over it is an unsupported topology for filter pruning.
    segmented: bool,
}

impl Gen<'_> {
    fn id(&mut self, stem: &str) -> String {
        self.n += 1;
        format!("{stem}{}", self.n)
    }

    fn conv(&mut self, src: &str, cin: usize, cout: usize, allow_stride: bool) -> String {
        let k = *[1usize, 3].choose(self.r).unwrap();
        let dil = if k == 3 && self.r.gen_bool(0.3) { 2 } else { 1 };
        let stride = if allow_stride && self.r.gen_bool(0.2) { 2 } else { 1 };
        let attrs = Conv2dAttrs::new(cin, cout, k)
            .padding(dil * (k / 2))
            .dilation(dil)
            .stride(stride)
            .bias(self.r.gen_bool(0.4));
        let id = self.id("conv");
        self.b.conv(&id, src, attrs)
    }

    fn conv_bn_relu(&mut self, src: &str, cin: usize, cout: usize) -> String {
        let c = self.conv(src, cin, cout, false);
        let id = self.id("bn");
        let n = self.b.bn(&id, &c, cout);
        if self.r.gen_bool(0.8) {
            let id = self.id("relu");
            self.b.relu(&id, &n)
        } else {
            n
        }
    }

    fn chain(&mut self, src: &str, cin: usize) -> (String, usize) {
        let cout = channels(self.r);
        let c = self.conv(src, cin, cout, true);
        self.segmented = false;
        if self.r.gen_bool(0.7) {
            let id = self.id("bn");
            let n = self.b.bn(&id, &c, cout);
            let id = self.id("relu");
            (self.b.relu(&id, &n), cout)
        } else {
            (c, cout)
        }
    }

    fn residual(&mut self, src: &str, cin: usize) -> (String, usize) {
        let mid = channels(self.r);
        let project = self.segmented || self.r.gen_bool(0.6);
        let cout = if project { channels(self.r) } else { cin };
        let a = self.conv_bn_relu(src, cin, mid);
        let c = self.conv(&a, mid, cout, false);
        let id = self.id("bn");
        let main = self.b.bn(&id, &c, cout);
        let skip = if project {
            let p = self.conv(src, cin, cout, false);
            let id = self.id("projbn");
            self.b.bn(&id, &p, cout)
        } else {
            src.to_string()
        };
        let id = self.id("add");
        let s = self.b.add(&id, &[&main, &skip]);
        let id = self.id("relu");
        self.segmented = false;
        (self.b.relu(&id, &s), cout)
    }

    fn fan_in(&mut self, src: &str, cin: usize) -> (String, usize) {
        let k = self.r.gen_range(2..=3);
        let mut outs = Vec::new();
        let mut total = 0;
        for _ in 0..k {
            let c = channels(self.r);
            outs.push(self.conv_bn_relu(src, cin, c));
            total += c;
        }
        if self.r.gen_bool(0.5) {
            let id = self.id("gap");
            let g = self.b.push(&id, LayerKind::GlobalAvgPool, &[src]);
            let c = channels(self.r);
            let gc = self.conv_bn_relu(&g, cin, c);
            let id = self.id("up");
            outs.push(self.b.push(&id, LayerKind::BilinearUpsample { size: UpsampleSize::MatchInput }, &[&gc, src]));
            total += c;
        }
        let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
        let id = self.id("cat");
        self.segmented = true;
        (self.b.concat(&id, &refs), total)
    }

    fn pool(&mut self, src: &str, cin: usize) -> (String, usize) {
        let id = self.id("pool");
        (self.b.push(&id, LayerKind::MaxPool2d { kernel: 3, stride: 1, padding: 1 }, &[src]), cin)
    }
}

/// A random conv net mixing chains, residual blocks (with and without
/// projection) and concat fan-ins, ending in a 1x1 head upsampled to the
/// input size. Spatial size stays valid for 16x16 inputs.
pub fn random_topology(seed: u64) -> GraphDef {
    let mut r = rng(seed);
    let cin = r.gen_range(1..=3);
    let blocks = r.gen_range(2..=5);
    let mut g = Gen { b: GraphBuilder::new(), r: &mut r, n: 0, segmented: false };
    let x = g.b.input("input", cin);
    let (mut cur, mut c) = g.chain(&x, cin);
    for _ in 0..blocks {
        let pick = g.r.gen_range(0..4);
        (cur, c) = match pick {
            0 => g.chain(&cur, c),
            1 => g.residual(&cur, c),
            2 => g.fan_in(&cur, c),
            _ => g.pool(&cur, c),
        };
    }
    let classes = g.r.gen_range(1..=2);
    let head = g.b.conv("head", &cur, Conv2dAttrs::new(c, classes, 1).bias(true));
    let out = g.b.push("upsample", LayerKind::BilinearUpsample { size: UpsampleSize::MatchInput }, &[&head, &x]);
    g.b.finish(&out).unwrap()
}

/// A small net for gradient checks. Every differentiable op appears across
/// the family: strided, dilated and grouped conv, batch norm, ReLU, add,
/// concat, max pool, global pooling, linear, fixed and matched upsampling.
pub fn random_diff_graph(seed: u64) -> GraphDef {
    let mut r = rng(seed);
    let cin = r.gen_range(1..=2);
    let mut g = Gen { b: GraphBuilder::new(), r: &mut r, n: 0, segmented: false };
    let x = g.b.input("input", cin);
    let c1 = 4;
    let mut cur = g.conv(&x, cin, c1, false);
    let mut c = c1;
    for step in 0..3 {
        let pick = (seed as usize + step) % 6;
        (cur, c) = match pick {
            0 => g.residual(&cur, c),
            1 => g.fan_in(&cur, c),
            2 => {
                let id = g.id("grp");
                let groups = if c % 2 == 0 { 2 } else { 1 };
                let out = g.b.conv(&id, &cur, Conv2dAttrs::new(c, c, 3).padding(1).groups(groups).bias(true));
                (out, c)
            }
            3 => {
                let id = g.id("pool");
                let p = g.b.push(&id, LayerKind::MaxPool2d { kernel: 2, stride: 2, padding: 0 }, &[&cur]);
                let id = g.id("upf");
                (g.b.push(&id, LayerKind::BilinearUpsample { size: UpsampleSize::Fixed { h: 8, w: 8 } }, &[&p]), c)
            }
            4 => {
                // Squeeze-style gate: GAP -> linear -> broadcast back by upsampling.
                let id = g.id("gap");
                let gp = g.b.push(&id, LayerKind::GlobalAvgPool, &[&cur]);
                let id = g.id("fc");
                let fc = g.b.push(&id, LayerKind::Linear { in_features: c, out_features: c, has_bias: true }, &[&gp]);
                let id = g.id("up");
                let up = g.b.push(&id, LayerKind::BilinearUpsample { size: UpsampleSize::MatchInput }, &[&fc, &cur]);
                let id = g.id("add");
                (g.b.add(&id, &[&cur, &up]), c)
            }
            _ => g.chain(&cur, c),
        };
    }
    let head = g.b.conv("head", &cur, Conv2dAttrs::new(c, 1, 1).bias(true));
    let out = g.b.push("upsample", LayerKind::BilinearUpsample { size: UpsampleSize::MatchInput }, &[&head, &x]);
    g.b.finish(&out).unwrap()
}

/// Seeded model with random batch-norm statistics and spread filter norms.
pub fn random_model(arch: GraphDef, seed: u64) -> ModelGraph {
    spread_filters(&randomize_bn(&init_model(arch, seed), seed), seed)
}

/// Sort oracle: the `floor(S * n)` smallest magnitudes over `tensors` taken
/// in order, ties removed earliest-position first.
pub fn sort_oracle(tensors: &[&[f32]], s: f64) -> Vec<Vec<bool>> {
    let flat: Vec<(f32, usize)> = tensors.iter().flat_map(|t| t.iter()).map(|w| w.abs()).enumerate().map(|(i, m)| (m, i)).collect();
    let k = (s * flat.len() as f64).floor() as usize;
    let mut order = flat.clone();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut keep = vec![true; flat.len()];
    for &(_, i) in &order[..k] {
        keep[i] = false;
    }
    let mut out = Vec::new();
    let mut off = 0;
    for t in tensors {
        out.push(keep[off..off + t.len()].to_vec());
        off += t.len();
    }
    out
}

pub fn confusion_oracle(pred: &BinaryMask, gt: &BinaryMask) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for y in 0..gt.h {
        for x in 0..gt.w {
            match (pred.get(y, x), gt.get(y, x)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    (tp, fp, fn_, tn)
}

/// Mann-Whitney statistic over every positive/negative pair, ties counting half.
pub fn auc_pairwise(scores: &[f32], gt: &[bool]) -> f64 {
    let pos: Vec<f32> = scores.iter().zip(gt).filter(|(_, &g)| g).map(|(s, _)| *s).collect();
    let neg: Vec<f32> = scores.iter().zip(gt).filter(|(_, &g)| !g).map(|(s, _)| *s).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn boundary_oracle(m: &BinaryMask) -> Vec<(i64, i64)> {
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < m.h as i64 && x < m.w as i64 && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..m.h as i64 {
        for x in 0..m.w as i64 {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Average Hausdorff distance by brute force over all boundary pairs.
pub fn ahd_all_pairs(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let ba = boundary_oracle(a);
    let bb = boundary_oracle(b);
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| (((y - v).pow(2) + (x - u).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    (directed(&ba, &bb) + directed(&bb, &ba)) / 2.0
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| r.gen_bool(density)).collect()).unwrap()
}

/// Analytic and numeric derivative of one parameter coordinate.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    /// False when the two step sizes disagree (a ReLU or max-pool switch
    /// inside the step).
    pub stable: bool,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Denominator floor of the relative error, so gradients that are zero up to
/// float32 cancellation are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-2;

/// Checks the engine's `backward` for `L = sum(d * y)`, `y` the train-mode
/// output on 4 random 8x8 inputs, against central differences of the
/// float64 reference forward. Samples up to `per_tensor` coordinates of each
/// parameter tensor.
pub fn gradient_samples(graph: &ModelGraph, seed: u64, per_tensor: usize) -> Vec<GradSample> {
    use reference::{forward64, params64, T64};
    use segprune::train::backward::{backward, forward_train};
    use segprune::{Tensor, TensorShape};
    let shape = TensorShape::new(4, graph.arch().input_channels(), 8, 8).unwrap();
    let x = Tensor::random(shape, seed);
    let tape = forward_train(graph, &x, None).unwrap();
    let d = Tensor::random(tape.output().shape, seed ^ 1);
    let grads = backward(graph, &tape, d.clone(), None).unwrap();

    let x64 = T64 { n: 4, c: shape.c, h: 8, w: 8, data: x.data.iter().map(|&v| v as f64).collect() };
    let p64 = params64(graph);
    let loss = |p: &reference::Params64| -> f64 {
        forward64(graph, p, &x64, true).data.iter().zip(&d.data).map(|(a, b)| a * *b as f64).sum()
    };
    let fd = |name: &str, i: usize, h: f64| {
        let mut plus = p64.clone();
        plus.get_mut(name).unwrap()[i] += h;
        let mut minus = p64.clone();
        minus.get_mut(name).unwrap()[i] -= h;
        (loss(&plus) - loss(&minus)) / (2.0 * h)
    };
    let mut r = rng(seed ^ 2);
    let mut out = Vec::new();
    for (name, p) in graph.params() {
        for _ in 0..per_tensor.min(p.len()) {
            let i = r.gen_range(0..p.len());
            let fine = fd(name, i, 1e-6);
            let coarse = fd(name, i, 1e-5);
            let stable = (fine - coarse).abs() <= 1e-4 * fine.abs().max(GRAD_FLOOR);
            out.push(GradSample { name: format!("{name}[{i}]"), analytic: grads[name][i] as f64, numeric: fine, stable });
        }
    }
    out
}
