//! Training-mode forward pass with a tape, and reverse-mode gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec::conv::{conv_sample_backward, ConvGeom};
use crate::exec::{conv_forward, ops, weight};
use crate::graph::{LayerKind, ModelGraph};
use crate::mask::MaskSet;
use crate::shape::{infer_shapes, ShapeMap};
use crate::tensor::Tensor;

use super::loss::{loss, LossKind};

struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

/// Batch statistics a training-mode batch norm observed.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    /// Unbiased (n - 1) variance, as used for running estimates.
    pub var: Vec<f32>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    values: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
    argmax: Vec<Option<Vec<u32>>>,
    shapes: ShapeMap,
    pub bn_stats: BTreeMap<String, BnBatchStats>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("graph has nodes")
    }
}

/// Parameter gradients keyed like [`ModelGraph::params`].
pub type Gradients = BTreeMap<String, Vec<f32>>;

fn batch_norm_train(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> (Tensor, BnCache, BnBatchStats) {
    let s = x.shape;
    let p = s.plane();
    let m = (s.n * p) as f64;
    let mut y = Tensor::zeros(s);
    let mut xhat = Tensor::zeros(s);
    let mut inv_std = vec![0.0f32; s.c];
    let mut stats = BnBatchStats { mean: vec![0.0; s.c], var: vec![0.0; s.c] };
    for c in 0..s.c {
        let planes = || (0..s.n).map(move |n| (n * s.c + c) * p);
        let mut sum = 0.0f64;
        for off in planes() {
            sum += x.data[off..off + p].iter().map(|v| *v as f64).sum::<f64>();
        }
        let mean = sum / m;
        let mut sq = 0.0f64;
        for off in planes() {
            sq += x.data[off..off + p].iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>();
        }
        let var = sq / m;
        let is = 1.0 / (var + eps as f64).sqrt();
        inv_std[c] = is as f32;
        stats.mean[c] = mean as f32;
        stats.var[c] = if m > 1.0 { (sq / (m - 1.0)) as f32 } else { var as f32 };
        for off in planes() {
            for i in off..off + p {
                let h = ((x.data[i] as f64 - mean) * is) as f32;
                xhat.data[i] = h;
                y.data[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, BnCache { xhat, inv_std }, stats)
}

/// Runs the graph with batch norms in training mode, recording a tape.
pub fn forward_train(graph: &ModelGraph, input: &Tensor, masks: Option<&MaskSet>) -> Result<Tape> {
    if let Some(m) = masks {
        m.validate_for(graph)?;
    }
    let shapes = infer_shapes(graph, input.shape)?;
    let arch = graph.arch();
    let nodes = graph.nodes();
    let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
    let mut bn = Vec::with_capacity(nodes.len());
    let mut argmax = Vec::with_capacity(nodes.len());
    let mut bn_stats = BTreeMap::new();
    let mut scratch = Vec::new();
    for node in nodes {
        let ins: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|s| &values[arch.position(s).expect("validated")])
            .collect();
        let out_shape = shapes[&node.id];
        let mut cache = None;
        let mut arg = None;
        let y = match &node.kind {
            LayerKind::Input { .. } => input.clone(),
            LayerKind::Conv2d(a) => {
                let w = weight(graph, &node.weight_name(), masks);
                let b = a.has_bias.then(|| graph.params()[&node.bias_name()].data.as_slice());
                conv_forward(ins[0], &w, b, a, out_shape, &mut scratch)
            }
            LayerKind::BatchNorm2d { epsilon, .. } => {
                let p = |s: &str| graph.params()[&format!("{}.{s}", node.id)].data.as_slice();
                let (y, c, st) = batch_norm_train(ins[0], p("weight"), p("bias"), *epsilon);
                cache = Some(c);
                bn_stats.insert(node.id.clone(), st);
                y
            }
            LayerKind::ReLU => ops::relu(ins[0]),
            LayerKind::Add => ops::add(&ins),
            LayerKind::Concat { .. } => ops::concat(&ins, out_shape),
            LayerKind::MaxPool2d { kernel, stride, padding } => {
                let (y, a) = ops::max_pool(ins[0], *kernel, *stride, *padding, out_shape);
                arg = Some(a);
                y
            }
            LayerKind::GlobalAvgPool => ops::global_avg_pool(ins[0]),
            LayerKind::BilinearUpsample { .. } => ops::bilinear(ins[0], out_shape.h, out_shape.w),
            LayerKind::Linear { out_features, has_bias, .. } => {
                let w = weight(graph, &node.weight_name(), masks);
                let b = has_bias.then(|| graph.params()[&node.bias_name()].data.as_slice());
                ops::linear(ins[0], &w, b, *out_features)
            }
        };
        if !y.is_finite() {
            return Err(Error::NonFinite { node: node.id.clone() });
        }
        values.push(y);
        bn.push(cache);
        argmax.push(arg);
    }
    // The output node need not be last; move it there for `Tape::output`.
    let out_pos = arch.position(graph.output_id()).expect("validated");
    if out_pos + 1 != values.len() {
        let out = values[out_pos].clone();
        values.push(out);
    }
    Ok(Tape { values, bn, argmax, shapes, bn_stats })
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Gradients of every parameter given the gradient of the graph output.
/// Gradients of masked weight entries are zero.
pub fn backward(graph: &ModelGraph, tape: &Tape, d_output: Tensor, masks: Option<&MaskSet>) -> Result<Gradients> {
    let arch = graph.arch();
    let nodes = graph.nodes();
    let pos = |id: &str| arch.position(id).expect("validated");
    // Whether a node's output depends on any parameter (only then is its
    // gradient needed).
    let mut needs = vec![false; nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        needs[i] = !n.expected_params().is_empty() || n.inputs.iter().any(|s| needs[pos(s)]);
    }
    let mut grads: Gradients = graph
        .params()
        .iter()
        .map(|(k, p)| (k.clone(), vec![0.0; p.len()]))
        .collect();
    let mut dys: Vec<Option<Tensor>> = vec![None; nodes.len()];
    dys[pos(graph.output_id())] = Some(d_output);
    let mut scratch = Vec::new();
    for i in (0..nodes.len()).rev() {
        let Some(dy) = dys[i].take() else { continue };
        let node = &nodes[i];
        let in_pos: Vec<usize> = node.inputs.iter().map(|s| pos(s)).collect();
        let x = |k: usize| &tape.values[in_pos[k]];
        match &node.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Conv2d(a) => {
                let w = weight(graph, &node.weight_name(), masks);
                let xs = x(0).shape;
                let geom = ConvGeom::new(a, xs.h, xs.w, dy.shape.h, dy.shape.w);
                let mut dw = std::mem::take(grads.get_mut(&node.weight_name()).unwrap());
                let mut db = a.has_bias.then(|| std::mem::take(grads.get_mut(&node.bias_name()).unwrap()));
                let mut dx = needs[in_pos[0]].then(|| Tensor::zeros(xs));
                for n in 0..xs.n {
                    conv_sample_backward(
                        x(0).sample(n),
                        &w,
                        dy.sample(n),
                        &geom,
                        &mut dw,
                        db.as_deref_mut(),
                        dx.as_mut().map(|t| t.sample_mut(n)),
                        &mut scratch,
                    );
                }
                grads.insert(node.weight_name(), dw);
                if let Some(db) = db {
                    grads.insert(node.bias_name(), db);
                }
                if let Some(dx) = dx {
                    accumulate(&mut dys[in_pos[0]], dx);
                }
            }
            LayerKind::BatchNorm2d { .. } => {
                let cache = tape.bn[i].as_ref().expect("training forward caches batch norms");
                let gamma = &graph.params()[&format!("{}.weight", node.id)].data;
                let s = dy.shape;
                let p = s.plane();
                let m = (s.n * p) as f32;
                let mut dx = Tensor::zeros(s);
                let mut dgamma = vec![0.0f32; s.c];
                let mut dbeta = vec![0.0f32; s.c];
                for c in 0..s.c {
                    let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
                    for n in 0..s.n {
                        let off = (n * s.c + c) * p;
                        for j in off..off + p {
                            sdy += dy.data[j] as f64;
                            sdyx += (dy.data[j] * cache.xhat.data[j]) as f64;
                        }
                    }
                    dgamma[c] = sdyx as f32;
                    dbeta[c] = sdy as f32;
                    let k = gamma[c] * cache.inv_std[c] / m;
                    for n in 0..s.n {
                        let off = (n * s.c + c) * p;
                        for j in off..off + p {
                            dx.data[j] = k * (m * dy.data[j] - sdy as f32 - cache.xhat.data[j] * sdyx as f32);
                        }
                    }
                }
                grads.insert(format!("{}.weight", node.id), dgamma);
                grads.insert(format!("{}.bias", node.id), dbeta);
                if needs[in_pos[0]] {
                    accumulate(&mut dys[in_pos[0]], dx);
                }
            }
            LayerKind::ReLU => {
                if needs[in_pos[0]] {
                    let y = &tape.values[i];
                    let data = dy.data.iter().zip(&y.data).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut dys[in_pos[0]], Tensor { shape: dy.shape, data });
                }
            }
            LayerKind::Add => {
                for &p in &in_pos {
                    if needs[p] {
                        accumulate(&mut dys[p], dy.clone());
                    }
                }
            }
            LayerKind::Concat { .. } => {
                let mut offset = 0;
                for &p in &in_pos {
                    let s = tape.values[p].shape;
                    let len = s.c * s.plane();
                    if needs[p] {
                        let mut d = Tensor::zeros(s);
                        for n in 0..s.n {
                            d.sample_mut(n).copy_from_slice(&dy.sample(n)[offset..offset + len]);
                        }
                        accumulate(&mut dys[p], d);
                    }
                    offset += len;
                }
            }
            LayerKind::MaxPool2d { .. } => {
                if needs[in_pos[0]] {
                    let arg = tape.argmax[i].as_ref().expect("training forward caches pooling");
                    let mut dx = Tensor::zeros(x(0).shape);
                    for (g, a) in dy.data.iter().zip(arg) {
                        dx.data[*a as usize] += g;
                    }
                    accumulate(&mut dys[in_pos[0]], dx);
                }
            }
            LayerKind::GlobalAvgPool => {
                if needs[in_pos[0]] {
                    let s = x(0).shape;
                    let p = s.plane();
                    let data = dy.data.iter().flat_map(|g| std::iter::repeat_n(g / p as f32, p)).collect();
                    accumulate(&mut dys[in_pos[0]], Tensor { shape: s, data });
                }
            }
            LayerKind::BilinearUpsample { .. } => {
                if needs[in_pos[0]] {
                    accumulate(&mut dys[in_pos[0]], ops::bilinear_backward(&dy, tape.shapes[&node.inputs[0]]));
                }
            }
            LayerKind::Linear { in_features, out_features, has_bias } => {
                let w = weight(graph, &node.weight_name(), masks);
                let n = dy.shape.n;
                let xin = &x(0).data;
                let dw = grads.get_mut(&node.weight_name()).unwrap();
                // dW (out x in) += dY^T (out x n) X (n x in)
                crate::exec::conv::gemm(*out_features, n, *in_features, &dy.data, true, xin, false, dw, 1.0);
                if *has_bias {
                    let db = grads.get_mut(&node.bias_name()).unwrap();
                    for row in dy.data.chunks(*out_features) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                if needs[in_pos[0]] {
                    let mut dx = Tensor::zeros(x(0).shape);
                    crate::exec::conv::gemm(n, *out_features, *in_features, &dy.data, false, &w, false, &mut dx.data, 0.0);
                    accumulate(&mut dys[in_pos[0]], dx);
                }
            }
        }
    }
    if let Some(m) = masks {
        for (name, mask) in m.iter() {
            crate::mask::zero_masked(grads.get_mut(name).unwrap(), &mask.keep);
        }
    }
    Ok(grads)
}

/// Loss of the training-mode forward pass against a flat target.
pub fn train_loss(graph: &ModelGraph, input: &Tensor, target: &[f32], kind: LossKind, masks: Option<&MaskSet>) -> Result<f64> {
    let tape = forward_train(graph, input, masks)?;
    let out = tape.output();
    check_target(out, target)?;
    Ok(loss(kind, &out.data, target, out.shape.numel() / out.shape.n).0)
}

fn check_target(out: &Tensor, target: &[f32]) -> Result<()> {
    if out.data.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "target holds {} values, model output {} is {}",
            target.len(),
            out.shape,
            out.data.len()
        )));
    }
    Ok(())
}

/// One forward/backward pass: loss, parameter gradients and BN batch statistics.
pub fn loss_and_gradients(
    graph: &ModelGraph,
    input: &Tensor,
    target: &[f32],
    kind: LossKind,
    masks: Option<&MaskSet>,
) -> Result<(f64, Gradients, BTreeMap<String, BnBatchStats>)> {
    let mut tape = forward_train(graph, input, masks)?;
    let out = tape.output();
    check_target(out, target)?;
    let (l, g) = loss(kind, &out.data, target, out.shape.numel() / out.shape.n);
    let d = Tensor { shape: out.shape, data: g };
    let grads = backward(graph, &tape, d, masks)?;
    Ok((l, grads, std::mem::take(&mut tape.bn_stats)))
}
