use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Conv2dAttrs, GraphDef, LayerKind, TensorShape, UpsampleSize};

/// Node id -> output shape.
pub type ShapeMap = BTreeMap<String, TensorShape>;

/// Output length of a convolution along one axis, or `None` when the
/// effective kernel does not fit.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

pub fn conv_output_shape(node: &str, a: &Conv2dAttrs, x: TensorShape) -> Result<TensorShape> {
    if x.c != a.in_channels {
        return Err(Error::shape(
            node,
            format!("expects {} input channels, got {}", a.in_channels, x.c),
        ));
    }
    let h = conv_out_len(x.h, a.kernel_h, a.stride, a.padding, a.dilation);
    let w = conv_out_len(x.w, a.kernel_w, a.stride, a.padding, a.dilation);
    match (h, w) {
        (Some(h), Some(w)) => Ok(TensorShape { n: x.n, c: a.out_channels, h, w }),
        _ => Err(Error::shape(
            node,
            format!("kernel does not fit a {}x{} input", x.h, x.w),
        )),
    }
}

/// Propagates `input` through the graph and returns every node's output shape.
pub fn infer_shapes(graph: impl AsRef<GraphDef>, input: TensorShape) -> Result<ShapeMap> {
    let g = graph.as_ref();
    let mut shapes = ShapeMap::new();
    for node in g.nodes() {
        let ins: Vec<TensorShape> = node.inputs.iter().map(|i| shapes[i]).collect();
        let id = node.id.as_str();
        let out = match &node.kind {
            LayerKind::Input { channels } => {
                if input.c != *channels {
                    return Err(Error::shape(
                        id,
                        format!("graph expects {channels} input channels, got {}", input.c),
                    ));
                }
                TensorShape::new(input.n, input.c, input.h, input.w)?
            }
            LayerKind::Conv2d(a) => conv_output_shape(id, a, ins[0])?,
            LayerKind::BatchNorm2d { channels, .. } => {
                if ins[0].c != *channels {
                    return Err(Error::shape(
                        id,
                        format!("expects {channels} channels, got {}", ins[0].c),
                    ));
                }
                ins[0]
            }
            LayerKind::ReLU => ins[0],
            LayerKind::Add => {
                if let Some(bad) = ins.iter().find(|s| **s != ins[0]) {
                    return Err(Error::shape(
                        id,
                        format!("Add inputs differ: {} vs {bad}", ins[0]),
                    ));
                }
                ins[0]
            }
            LayerKind::Concat { .. } => {
                let first = ins[0];
                if let Some(bad) = ins
                    .iter()
                    .find(|s| (s.n, s.h, s.w) != (first.n, first.h, first.w))
                {
                    return Err(Error::shape(
                        id,
                        format!("Concat inputs disagree outside the channel axis: {first} vs {bad}"),
                    ));
                }
                TensorShape {
                    c: ins.iter().map(|s| s.c).sum(),
                    ..first
                }
            }
            LayerKind::MaxPool2d { kernel, stride, padding } => {
                let x = ins[0];
                match (
                    conv_out_len(x.h, *kernel, *stride, *padding, 1),
                    conv_out_len(x.w, *kernel, *stride, *padding, 1),
                ) {
                    (Some(h), Some(w)) => TensorShape { h, w, ..x },
                    _ => return Err(Error::shape(id, format!("pool window does not fit {x}"))),
                }
            }
            LayerKind::GlobalAvgPool => TensorShape { h: 1, w: 1, ..ins[0] },
            LayerKind::BilinearUpsample { size } => {
                let (h, w) = match size {
                    UpsampleSize::Fixed { h, w } => (*h, *w),
                    UpsampleSize::MatchInput => (ins[1].h, ins[1].w),
                };
                TensorShape { h, w, ..ins[0] }
            }
            LayerKind::Linear { in_features, out_features, .. } => {
                let x = ins[0];
                if x.c * x.h * x.w != *in_features {
                    return Err(Error::shape(
                        id,
                        format!("expects {in_features} features, input {x} flattens to {}", x.c * x.h * x.w),
                    ));
                }
                TensorShape { n: x.n, c: *out_features, h: 1, w: 1 }
            }
        };
        shapes.insert(node.id.clone(), out);
    }
    Ok(shapes)
}
