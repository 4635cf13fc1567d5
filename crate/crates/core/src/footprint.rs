//! Parameter, buffer, MAC and size accounting.
//!
//! Only Conv2d and Linear contribute MACs; elementwise, pooling and
//! upsampling work is not counted. Sizes assume 4 bytes per value.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{GraphDef, LayerKind, LayerNode, ModelGraph, TensorShape};
use crate::shape::infer_shapes;

pub const BYTES_PER_VALUE: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub node: String,
    pub kind: String,
    pub params: u64,
    pub buffers: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub total_params: u64,
    pub nnz_params: u64,
    pub buffer_count: u64,
    /// `None` when no input shape was given.
    pub macs: Option<u64>,
    pub size_bytes: u64,
    pub layers: Vec<LayerFootprint>,
}

impl FootprintReport {
    pub fn size_mb(&self) -> f64 {
        self.size_bytes as f64 / 1e6
    }
}

fn node_params(node: &LayerNode) -> u64 {
    node.expected_params()
        .iter()
        .map(|(_, d)| d.iter().product::<usize>() as u64)
        .sum()
}

fn node_buffers(node: &LayerNode) -> u64 {
    node.expected_buffers()
        .iter()
        .map(|(_, d)| d.iter().product::<usize>() as u64)
        .sum()
}

/// Parameter count implied by the architecture alone.
pub fn arch_param_count(graph: impl AsRef<GraphDef>) -> u64 {
    graph.as_ref().nodes().iter().map(node_params).sum()
}

pub fn node_param_count(node: &LayerNode) -> u64 {
    node_params(node)
}

/// Per-layer and total parameter and buffer counts; `macs` is left empty.
pub fn count_params(graph: &ModelGraph) -> FootprintReport {
    let layers: Vec<LayerFootprint> = graph
        .nodes()
        .iter()
        .map(|n| LayerFootprint {
            node: n.id.clone(),
            kind: n.kind.name().to_string(),
            params: node_params(n),
            buffers: node_buffers(n),
            macs: 0,
        })
        .collect();
    let total_params = layers.iter().map(|l| l.params).sum::<u64>();
    let buffer_count = layers.iter().map(|l| l.buffers).sum::<u64>();
    let nnz_params = graph
        .params()
        .values()
        .map(|p| p.data.iter().filter(|v| **v != 0.0).count() as u64)
        .sum();
    FootprintReport {
        total_params,
        nnz_params,
        buffer_count,
        macs: None,
        size_bytes: BYTES_PER_VALUE * (total_params + buffer_count),
        layers,
    }
}

/// Per-node MACs for a given input shape, in node order.
pub fn layer_macs(graph: impl AsRef<GraphDef>, input: TensorShape) -> Result<Vec<(String, u64)>> {
    let g = graph.as_ref();
    let shapes = infer_shapes(g, input)?;
    Ok(g.nodes()
        .iter()
        .map(|n| {
            let out = shapes[&n.id];
            let macs = match &n.kind {
                LayerKind::Conv2d(a) => {
                    (out.n * out.h * out.w * out.c * a.filter_len()) as u64
                }
                LayerKind::Linear { in_features, out_features, .. } => {
                    (out.n * in_features * out_features) as u64
                }
                _ => 0,
            };
            (n.id.clone(), macs)
        })
        .collect())
}

pub fn count_macs(graph: impl AsRef<GraphDef>, input: TensorShape) -> Result<u64> {
    Ok(layer_macs(graph, input)?.iter().map(|(_, m)| m).sum())
}

/// Full footprint: counts plus MACs at `input`.
pub fn footprint(graph: &ModelGraph, input: TensorShape) -> Result<FootprintReport> {
    let mut report = count_params(graph);
    let macs = layer_macs(graph, input)?;
    for (layer, (_, m)) in report.layers.iter_mut().zip(&macs) {
        layer.macs = *m;
    }
    report.macs = Some(macs.iter().map(|(_, m)| m).sum());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Conv2dAttrs, GraphBuilder};
    use crate::init::init_model;

    #[test]
    fn aspp_branch_sized_conv() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 2048);
        let c = b.conv("c", &x, Conv2dAttrs::new(2048, 256, 3).padding(12).dilation(12));
        let g = b.finish(&c).unwrap();
        assert_eq!(arch_param_count(&g), 4_718_592);
    }

    #[test]
    fn pointwise_head_with_bias() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 256);
        let c = b.conv("c", &x, Conv2dAttrs::new(256, 1, 1).bias(true));
        let g = b.finish(&c).unwrap();
        assert_eq!(arch_param_count(&g), 257);
    }

    #[test]
    fn tiny_pointwise_macs() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 2);
        let c = b.conv("c", &x, Conv2dAttrs::new(2, 3, 1));
        let g = b.finish(&c).unwrap();
        assert_eq!(count_macs(&g, TensorShape::new(1, 2, 1, 1).unwrap()).unwrap(), 6);
    }

    #[test]
    fn batch_norm_buffers_and_size() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let c = b.conv("c", &x, Conv2dAttrs::new(3, 8, 3));
        let n = b.bn("bn", &c, 8);
        let g = b.finish(&n).unwrap();
        let m = init_model(g, 1);
        let r = count_params(&m);
        assert_eq!(r.total_params, 8 * 27 + 16);
        assert_eq!(r.buffer_count, 17);
        assert_eq!(r.size_bytes, 4 * (r.total_params + r.buffer_count));
        assert!(r.nnz_params <= r.total_params);
    }
}
