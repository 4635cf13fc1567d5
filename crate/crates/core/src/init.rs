//! Seeded parameter initialisation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{GraphDef, LayerKind, ModelGraph, Param};

/// Kaiming-uniform (fan-in, ReLU gain) for conv/linear weights, uniform
/// `1/sqrt(fan_in)` biases, unit/zero batch-norm affine terms and fresh
/// running statistics.
pub fn init_model(arch: GraphDef, seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for node in arch.nodes() {
        let fan_in = match &node.kind {
            LayerKind::Conv2d(a) => a.filter_len(),
            LayerKind::Linear { in_features, .. } => *in_features,
            _ => 0,
        };
        match &node.kind {
            LayerKind::Conv2d(_) | LayerKind::Linear { .. } => {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let bias_bound = (1.0 / fan_in as f64).sqrt() as f32;
                for (name, dims) in node.expected_params() {
                    let b = if name.ends_with(".bias") { bias_bound } else { bound };
                    let n = dims.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-b..b)).collect();
                    params.insert(name, Param { dims, data });
                }
            }
            LayerKind::BatchNorm2d { channels, .. } => {
                params.insert(node.weight_name(), Param::filled(vec![*channels], 1.0));
                params.insert(node.bias_name(), Param::zeros(vec![*channels]));
                for (name, dims) in node.expected_buffers() {
                    let value = if name.ends_with(".running_var") { 1.0 } else { 0.0 };
                    buffers.insert(name, Param::filled(dims, value));
                }
            }
            _ => {}
        }
    }
    ModelGraph::new(arch, params, buffers).expect("initialised tensors follow node attributes")
}
