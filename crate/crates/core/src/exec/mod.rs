//! Reference forward execution and the CPU latency harness.
//!
//! Execution is single-threaded and allocation order is fixed, so identical
//! inputs and parameters always produce bit-identical outputs.

mod bench;
pub(crate) mod conv;
pub(crate) mod ops;

use std::borrow::Cow;
use std::collections::BTreeMap;

pub use bench::{bench, bench_input, BenchReport, LatencyStats};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, TensorShape};
use crate::mask::{masked_copy, MaskSet};
use crate::shape::{infer_shapes, ShapeMap};
use crate::tensor::Tensor;
use conv::ConvGeom;

/// Scratch buffers for one thread of execution.
#[derive(Default)]
pub struct Executor {
    scratch: Vec<f32>,
}

impl Executor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Output of the graph's output node.
    pub fn forward(&mut self, graph: &ModelGraph, input: &Tensor, masks: Option<&MaskSet>) -> Result<Tensor> {
        let mut out = self.run(graph, input, masks, false)?;
        Ok(out.remove(graph.output_id()).expect("output node evaluated"))
    }

    /// Every node's output, keyed by node id.
    pub fn forward_all(
        &mut self,
        graph: &ModelGraph,
        input: &Tensor,
        masks: Option<&MaskSet>,
    ) -> Result<BTreeMap<String, Tensor>> {
        self.run(graph, input, masks, true)
    }

    fn run(
        &mut self,
        graph: &ModelGraph,
        input: &Tensor,
        masks: Option<&MaskSet>,
        keep_all: bool,
    ) -> Result<BTreeMap<String, Tensor>> {
        if let Some(m) = masks {
            m.validate_for(graph)?;
        }
        let shapes = infer_shapes(graph, input.shape)?;
        let nodes = graph.nodes();
        // Index of the last node reading each node's output.
        let mut last_use = vec![0usize; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            for src in &node.inputs {
                last_use[graph.arch().position(src).unwrap()] = i;
            }
        }
        let out_pos = graph.arch().position(graph.output_id()).unwrap();
        let mut values: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|s| {
                    values[graph.arch().position(s).unwrap()]
                        .as_ref()
                        .expect("inputs evaluated before consumers")
                })
                .collect();
            let y = eval_node(graph, i, &ins, input, &shapes, masks, &mut self.scratch)?;
            if !y.is_finite() {
                return Err(Error::NonFinite { node: node.id.clone() });
            }
            values[i] = Some(y);
            if !keep_all {
                for src in &node.inputs {
                    let p = graph.arch().position(src).unwrap();
                    if last_use[p] == i && p != out_pos {
                        values[p] = None;
                    }
                }
            }
        }
        Ok(nodes
            .iter()
            .zip(values)
            .filter_map(|(n, v)| v.map(|t| (n.id.clone(), t)))
            .collect())
    }
}

pub(crate) fn weight<'a>(graph: &'a ModelGraph, name: &str, masks: Option<&MaskSet>) -> Cow<'a, [f32]> {
    let p = &graph.params()[name];
    match masks.and_then(|m| m.get(name)) {
        Some(m) => Cow::Owned(masked_copy(&p.data, &m.keep)),
        None => Cow::Borrowed(&p.data),
    }
}

/// Inference-mode evaluation of node `i`.
pub(crate) fn eval_node(
    graph: &ModelGraph,
    i: usize,
    ins: &[&Tensor],
    input: &Tensor,
    shapes: &ShapeMap,
    masks: Option<&MaskSet>,
    scratch: &mut Vec<f32>,
) -> Result<Tensor> {
    let node = &graph.nodes()[i];
    let out_shape = shapes[&node.id];
    Ok(match &node.kind {
        LayerKind::Input { .. } => input.clone(),
        LayerKind::Conv2d(a) => {
            let w = weight(graph, &node.weight_name(), masks);
            let b = a.has_bias.then(|| graph.params()[&node.bias_name()].data.as_slice());
            conv_forward(ins[0], &w, b, a, out_shape, scratch)
        }
        LayerKind::BatchNorm2d { epsilon, .. } => {
            let p = |s: &str| graph.params()[&format!("{}.{s}", node.id)].data.as_slice();
            let b = |s: &str| graph.buffers()[&format!("{}.{s}", node.id)].data.as_slice();
            ops::batch_norm_inference(
                ins[0],
                p("weight"),
                p("bias"),
                b("running_mean"),
                b("running_var"),
                *epsilon,
            )
        }
        LayerKind::ReLU => ops::relu(ins[0]),
        LayerKind::Add => ops::add(ins),
        LayerKind::Concat { .. } => ops::concat(ins, out_shape),
        LayerKind::MaxPool2d { kernel, stride, padding } => {
            ops::max_pool(ins[0], *kernel, *stride, *padding, out_shape).0
        }
        LayerKind::GlobalAvgPool => ops::global_avg_pool(ins[0]),
        LayerKind::BilinearUpsample { .. } => ops::bilinear(ins[0], out_shape.h, out_shape.w),
        LayerKind::Linear { out_features, has_bias, .. } => {
            let w = weight(graph, &node.weight_name(), masks);
            let b = has_bias.then(|| graph.params()[&node.bias_name()].data.as_slice());
            ops::linear(ins[0], &w, b, *out_features)
        }
    })
}

pub(crate) fn conv_forward(
    x: &Tensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    a: &crate::graph::Conv2dAttrs,
    out_shape: TensorShape,
    scratch: &mut Vec<f32>,
) -> Tensor {
    let geom = ConvGeom::new(a, x.shape.h, x.shape.w, out_shape.h, out_shape.w);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..x.shape.n {
        conv::conv_sample(x.sample(n), weight, bias, &geom, out.sample_mut(n), scratch);
    }
    out
}

/// Convenience wrapper around a fresh [`Executor`].
pub fn forward(graph: &ModelGraph, input: &Tensor, masks: Option<&MaskSet>) -> Result<Tensor> {
    Executor::new().forward(graph, input, masks)
}

pub fn forward_all(
    graph: &ModelGraph,
    input: &Tensor,
    masks: Option<&MaskSet>,
) -> Result<BTreeMap<String, Tensor>> {
    Executor::new().forward_all(graph, input, masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Conv2dAttrs, GraphBuilder, Param};
    use crate::init::init_model;

    fn conv_model(attrs: Conv2dAttrs, seed: u64) -> ModelGraph {
        let c = attrs.in_channels;
        let mut b = GraphBuilder::new();
        let x = b.input("x", c);
        let y = b.conv("conv", &x, attrs);
        init_model(b.finish(&y).unwrap(), seed)
    }

    /// Six nested loops, straight from the definition of dilated cross-correlation.
    fn naive_conv(x: &Tensor, w: &[f32], a: &Conv2dAttrs, oh: usize, ow: usize) -> Vec<f32> {
        let s = x.shape;
        let mut out = vec![0.0f64; a.out_channels * oh * ow];
        for co in 0..a.out_channels {
            for ci in 0..a.in_channels {
                for ky in 0..a.kernel_h {
                    for kx in 0..a.kernel_w {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let iy = (oy * a.stride + ky * a.dilation) as isize - a.padding as isize;
                                let ix = (ox * a.stride + kx * a.dilation) as isize - a.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let wv = w[((co * a.in_channels + ci) * a.kernel_h + ky) * a.kernel_w + kx];
                                out[(co * oh + oy) * ow + ox] +=
                                    wv as f64 * x.at(0, ci, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    #[test]
    fn identity_pointwise_conv() {
        let m = conv_model(Conv2dAttrs::new(3, 3, 1), 0);
        let mut params = m.params().clone();
        let w = params.get_mut("conv.weight").unwrap();
        w.data = vec![0.0; 9];
        for c in 0..3 {
            w.data[c * 3 + c] = 1.0;
        }
        let m = m.with_params(params).unwrap();
        let x = Tensor::random(TensorShape::new(2, 3, 5, 4).unwrap(), 3);
        assert_eq!(forward(&m, &x, None).unwrap(), x);
    }

    #[test]
    fn relu_clamps() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 1);
        let r = b.relu("r", &x);
        let m = init_model(b.finish(&r).unwrap(), 0);
        let t = Tensor::new(TensorShape::new(1, 1, 1, 3).unwrap(), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(forward(&m, &t, None).unwrap().data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn packed_conv_matches_naive_loops() {
        for (attrs, hw) in [
            (Conv2dAttrs::new(3, 4, 3).padding(2).dilation(2), 9),
            (Conv2dAttrs::new(2, 5, 3).stride(2).padding(1), 9),
            (Conv2dAttrs::new(4, 3, 1), 6),
            (Conv2dAttrs::new(3, 2, 5).stride(3).padding(4).dilation(3), 11),
        ] {
            let m = conv_model(attrs.clone(), 11);
            let x = Tensor::random(TensorShape::new(1, attrs.in_channels, hw, hw).unwrap(), 5);
            let y = forward(&m, &x, None).unwrap();
            let expect = naive_conv(&x, &m.params()["conv.weight"].data, &attrs, y.shape.h, y.shape.w);
            let diff = y.data.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-5, "{attrs:?}: {diff}");
        }
    }

    #[test]
    fn grouped_conv_runs_per_group() {
        let attrs = Conv2dAttrs::new(4, 4, 3).padding(1).groups(2);
        let m = conv_model(attrs, 2);
        let x = Tensor::random(TensorShape::new(1, 4, 5, 5).unwrap(), 1);
        let y = forward(&m, &x, None).unwrap();
        // Output channel 0 only sees input channels 0..2.
        let mut x2 = x.clone();
        for v in &mut x2.data[2 * 25..] {
            *v = 0.0;
        }
        let y2 = forward(&m, &x2, None).unwrap();
        assert_eq!(&y.data[..2 * 25], &y2.data[..2 * 25]);
    }

    #[test]
    fn all_ones_mask_matches_unmasked() {
        let m = conv_model(Conv2dAttrs::new(2, 3, 3).padding(1), 4);
        let x = Tensor::random(TensorShape::new(1, 2, 6, 6).unwrap(), 9);
        let ones = MaskSet::ones(&m);
        assert_eq!(forward_all(&m, &x, Some(&ones)).unwrap(), forward_all(&m, &x, None).unwrap());
        assert_eq!(forward_all(&m, &x, None).unwrap().len(), 2);
    }

    #[test]
    fn non_finite_reports_node() {
        let m = conv_model(Conv2dAttrs::new(1, 1, 1), 4);
        let mut params = m.params().clone();
        params.insert("conv.weight".into(), Param::new(vec![1, 1, 1, 1], vec![f32::MAX]).unwrap());
        let m = m.with_params(params).unwrap();
        let x = Tensor::new(TensorShape::new(1, 1, 1, 1).unwrap(), vec![10.0]).unwrap();
        let err = forward(&m, &x, None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref node } if node == "conv"));
    }
}
