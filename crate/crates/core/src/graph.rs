//! Neutral compute-graph representation of CNN segmentation models.
//!
//! A [`GraphDef`] holds the architecture (typed layer nodes in topological
//! order); a [`ModelGraph`] pairs it with named float32 parameter and buffer
//! tensors. Both are immutable once constructed: transformations build new
//! values instead of editing in place.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// NCHW activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl TensorShape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be >= 1, got {n}x{c}x{h}x{w}"
            )));
        }
        Ok(TensorShape { n, c, h, w })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_batch(self, n: usize) -> Self {
        TensorShape { n, ..self }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dAttrs {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// Atrous rate.
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl Conv2dAttrs {
    /// Square kernel, stride 1, no padding, no dilation, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2dAttrs {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel_h,
            self.kernel_w,
        ]
    }

    /// Weights per output filter.
    pub fn filter_len(&self) -> usize {
        self.in_channels / self.groups.max(1) * self.kernel_h * self.kernel_w
    }
}

/// How a bilinear upsample picks its output resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum UpsampleSize {
    Fixed { h: usize, w: usize },
    /// Output takes the spatial size of the node's second input.
    MatchInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv2d(Conv2dAttrs),
    BatchNorm2d {
        channels: usize,
        epsilon: f32,
    },
    ReLU,
    Add,
    Concat {
        axis: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    BilinearUpsample {
        size: UpsampleSize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        has_bias: bool,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "Input",
            LayerKind::Conv2d(_) => "Conv2d",
            LayerKind::BatchNorm2d { .. } => "BatchNorm2d",
            LayerKind::ReLU => "ReLU",
            LayerKind::Add => "Add",
            LayerKind::Concat { .. } => "Concat",
            LayerKind::MaxPool2d { .. } => "MaxPool2d",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::BilinearUpsample { .. } => "BilinearUpsample",
            LayerKind::Linear { .. } => "Linear",
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerKind::BatchNorm2d {
            channels,
            epsilon: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.id)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.id)
    }

    /// Parameter tensors (name, dims) this node owns.
    pub fn expected_params(&self) -> Vec<(String, Vec<usize>)> {
        match &self.kind {
            LayerKind::Conv2d(a) => {
                let mut v = vec![(self.weight_name(), a.weight_dims())];
                if a.has_bias {
                    v.push((self.bias_name(), vec![a.out_channels]));
                }
                v
            }
            LayerKind::BatchNorm2d { channels, .. } => vec![
                (self.weight_name(), vec![*channels]),
                (self.bias_name(), vec![*channels]),
            ],
            LayerKind::Linear {
                in_features,
                out_features,
                has_bias,
            } => {
                let mut v = vec![(self.weight_name(), vec![*out_features, *in_features])];
                if *has_bias {
                    v.push((self.bias_name(), vec![*out_features]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Buffer tensors (name, dims) this node owns; only batch norm has any.
    pub fn expected_buffers(&self) -> Vec<(String, Vec<usize>)> {
        match &self.kind {
            LayerKind::BatchNorm2d { channels, .. } => vec![
                (format!("{}.running_mean", self.id), vec![*channels]),
                (format!("{}.running_var", self.id), vec![*channels]),
                (format!("{}.num_batches_tracked", self.id), vec![1]),
            ],
            _ => Vec::new(),
        }
    }
}

/// A dense float32 tensor stored under a name in the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor of dims {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Param { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Param {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Self {
        let n = dims.iter().product();
        Param {
            dims,
            data: vec![value; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Deserialize)]
struct RawGraphDef {
    input: String,
    output: String,
    #[serde(default)]
    backbone_output: Option<String>,
    nodes: Vec<LayerNode>,
}

/// Validated architecture: typed nodes in topological order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraphDef")]
pub struct GraphDef {
    input: String,
    output: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    backbone_output: Option<String>,
    nodes: Vec<LayerNode>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<RawGraphDef> for GraphDef {
    type Error = Error;

    fn try_from(raw: RawGraphDef) -> Result<Self> {
        GraphDef::new(raw.nodes, raw.input, raw.output, raw.backbone_output)
    }
}

impl GraphDef {
    pub fn new(
        nodes: Vec<LayerNode>,
        input: impl Into<String>,
        output: impl Into<String>,
        backbone_output: Option<String>,
    ) -> Result<Self> {
        let input = input.into();
        let output = output.into();
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.id.is_empty() {
                return Err(Error::InvalidGraph(format!("node #{i} has an empty id")));
            }
            for src in &node.inputs {
                if !index.contains_key(src) {
                    if src == &node.id || nodes.iter().any(|n| &n.id == src) {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}` consumes `{src}` before it is defined (not a topological order)",
                            node.id
                        )));
                    }
                    return Err(Error::DanglingInput {
                        node: node.id.clone(),
                        input: src.clone(),
                    });
                }
            }
            validate_node(node)?;
            if index.insert(node.id.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id `{}`", node.id)));
            }
        }
        match index.get(&input).map(|&i| &nodes[i].kind) {
            Some(LayerKind::Input { .. }) => {}
            Some(_) => {
                return Err(Error::InvalidGraph(format!(
                    "graph input `{input}` is not an Input node"
                )))
            }
            None => {
                return Err(Error::DanglingInput {
                    node: "<graph input>".into(),
                    input,
                })
            }
        }
        let inputs = nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Input { .. }))
            .count();
        if inputs != 1 {
            return Err(Error::InvalidGraph(format!(
                "expected exactly one Input node, found {inputs}"
            )));
        }
        if !index.contains_key(&output) {
            return Err(Error::DanglingInput {
                node: "<graph output>".into(),
                input: output,
            });
        }
        if let Some(b) = &backbone_output {
            if !index.contains_key(b) {
                return Err(Error::DanglingInput {
                    node: "<backbone output>".into(),
                    input: b.clone(),
                });
            }
        }
        Ok(GraphDef {
            input,
            output,
            backbone_output,
            nodes,
            index,
        })
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn input_id(&self) -> &str {
        &self.input
    }

    pub fn output_id(&self) -> &str {
        &self.output
    }

    pub fn backbone_output(&self) -> Option<&str> {
        self.backbone_output.as_deref()
    }

    pub fn input_channels(&self) -> usize {
        match self.node(&self.input).map(|n| &n.kind) {
            Some(LayerKind::Input { channels }) => *channels,
            _ => unreachable!("validated graph input is an Input node"),
        }
    }

    /// Map from node id to the ids of nodes consuming it, in node order.
    pub fn consumers(&self) -> HashMap<&str, Vec<&str>> {
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for node in &self.nodes {
            for src in &node.inputs {
                out.entry(src.as_str()).or_default().push(node.id.as_str());
            }
        }
        out
    }

    /// Same graph with a different (still topological) node order.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let nodes = order.iter().map(|&i| self.nodes[i].clone()).collect();
        GraphDef::new(
            nodes,
            self.input.clone(),
            self.output.clone(),
            self.backbone_output.clone(),
        )
    }
}

impl AsRef<GraphDef> for GraphDef {
    fn as_ref(&self) -> &GraphDef {
        self
    }
}

fn validate_node(node: &LayerNode) -> Result<()> {
    let bad = |detail: String| Err(Error::InvalidGraph(format!("node `{}`: {detail}", node.id)));
    let arity = node.inputs.len();
    match &node.kind {
        LayerKind::Input { channels } => {
            if arity != 0 {
                return bad("Input takes no inputs".into());
            }
            if *channels == 0 {
                return bad("Input needs at least one channel".into());
            }
        }
        LayerKind::Conv2d(a) => {
            if arity != 1 {
                return bad(format!("Conv2d takes one input, got {arity}"));
            }
            if a.in_channels == 0 || a.out_channels == 0 || a.kernel_h == 0 || a.kernel_w == 0 {
                return bad("Conv2d channels and kernel must be >= 1".into());
            }
            if a.stride == 0 || a.dilation == 0 || a.groups == 0 {
                return bad("Conv2d stride, dilation and groups must be >= 1".into());
            }
            if a.in_channels % a.groups != 0 || a.out_channels % a.groups != 0 {
                return bad(format!(
                    "channels {}->{} not divisible by groups {}",
                    a.in_channels, a.out_channels, a.groups
                ));
            }
        }
        LayerKind::BatchNorm2d { channels, epsilon } => {
            if arity != 1 {
                return bad(format!("BatchNorm2d takes one input, got {arity}"));
            }
            if *channels == 0 || !(*epsilon > 0.0) {
                return bad("BatchNorm2d needs channels >= 1 and epsilon > 0".into());
            }
        }
        LayerKind::ReLU | LayerKind::GlobalAvgPool => {
            if arity != 1 {
                return bad(format!("{} takes one input, got {arity}", node.kind.name()));
            }
        }
        LayerKind::Add => {
            if arity < 2 {
                return bad("Add needs at least two inputs".into());
            }
        }
        LayerKind::Concat { axis } => {
            if arity < 1 {
                return bad("Concat needs at least one input".into());
            }
            if *axis != 1 {
                return bad(format!("Concat only supports the channel axis 1, got {axis}"));
            }
        }
        LayerKind::MaxPool2d {
            kernel,
            stride,
            padding,
        } => {
            if arity != 1 {
                return bad(format!("MaxPool2d takes one input, got {arity}"));
            }
            if *kernel == 0 || *stride == 0 || 2 * padding > *kernel {
                return bad("MaxPool2d needs kernel, stride >= 1 and padding <= kernel/2".into());
            }
        }
        LayerKind::BilinearUpsample { size } => {
            let want = match size {
                UpsampleSize::Fixed { h, w } => {
                    if *h == 0 || *w == 0 {
                        return bad("upsample target must be >= 1".into());
                    }
                    1
                }
                UpsampleSize::MatchInput => 2,
            };
            if arity != want {
                return bad(format!("BilinearUpsample takes {want} input(s), got {arity}"));
            }
        }
        LayerKind::Linear {
            in_features,
            out_features,
            ..
        } => {
            if arity != 1 {
                return bad(format!("Linear takes one input, got {arity}"));
            }
            if *in_features == 0 || *out_features == 0 {
                return bad("Linear features must be >= 1".into());
            }
        }
    }
    Ok(())
}

/// An architecture together with its parameters and buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    arch: GraphDef,
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Param>,
}

impl AsRef<GraphDef> for ModelGraph {
    fn as_ref(&self) -> &GraphDef {
        &self.arch
    }
}

impl ModelGraph {
    /// Checks that every node owns exactly the tensors its attributes imply.
    pub fn new(
        arch: GraphDef,
        params: BTreeMap<String, Param>,
        buffers: BTreeMap<String, Param>,
    ) -> Result<Self> {
        check_tensors(&arch, &params, LayerNode::expected_params, "parameter")?;
        check_tensors(&arch, &buffers, LayerNode::expected_buffers, "buffer")?;
        Ok(ModelGraph {
            arch,
            params,
            buffers,
        })
    }

    pub fn arch(&self) -> &GraphDef {
        &self.arch
    }

    pub fn nodes(&self) -> &[LayerNode] {
        self.arch.nodes()
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.arch.node(id)
    }

    pub fn input_id(&self) -> &str {
        self.arch.input_id()
    }

    pub fn output_id(&self) -> &str {
        self.arch.output_id()
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn buffers(&self) -> &BTreeMap<String, Param> {
        &self.buffers
    }

    pub fn buffer(&self, name: &str) -> Option<&Param> {
        self.buffers.get(name)
    }

    /// Conv and linear weight names in node order: the tensors weight pruning may mask.
    pub fn prunable_params(&self) -> Vec<&str> {
        self.arch
            .nodes()
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv2d(_) | LayerKind::Linear { .. }))
            .map(|n| {
                self.params
                    .get_key_value(&n.weight_name())
                    .map(|(k, _)| k.as_str())
                    .expect("validated graph owns its weights")
            })
            .collect()
    }

    pub fn with_params(&self, params: BTreeMap<String, Param>) -> Result<Self> {
        ModelGraph::new(self.arch.clone(), params, self.buffers.clone())
    }

    pub fn with_tensors(
        &self,
        params: BTreeMap<String, Param>,
        buffers: BTreeMap<String, Param>,
    ) -> Result<Self> {
        ModelGraph::new(self.arch.clone(), params, buffers)
    }

    pub fn into_parts(self) -> (GraphDef, BTreeMap<String, Param>, BTreeMap<String, Param>) {
        (self.arch, self.params, self.buffers)
    }
}

fn check_tensors(
    arch: &GraphDef,
    tensors: &BTreeMap<String, Param>,
    expected: fn(&LayerNode) -> Vec<(String, Vec<usize>)>,
    what: &str,
) -> Result<()> {
    let mut seen = HashSet::new();
    for node in arch.nodes() {
        for (name, dims) in expected(node) {
            match tensors.get(&name) {
                None => {
                    return Err(Error::InvalidGraph(format!(
                        "node `{}` is missing {what} `{name}`",
                        node.id
                    )))
                }
                Some(p) if p.dims != dims => {
                    return Err(Error::InvalidGraph(format!(
                        "{what} `{name}` has dims {:?}, node `{}` implies {dims:?}",
                        p.dims, node.id
                    )))
                }
                Some(p) if p.data.len() != dims.iter().product::<usize>() => {
                    return Err(Error::InvalidGraph(format!(
                        "{what} `{name}` holds {} values for dims {dims:?}",
                        p.data.len()
                    )))
                }
                Some(_) => {
                    seen.insert(name);
                }
            }
        }
    }
    if let Some(extra) = tensors.keys().find(|k| !seen.contains(*k)) {
        return Err(Error::InvalidGraph(format!(
            "{what} `{extra}` does not belong to any node"
        )));
    }
    Ok(())
}

/// Incremental construction helper for architectures.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    input: Option<String>,
    backbone_output: Option<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> String {
        let id = id.into();
        self.nodes.push(LayerNode {
            id: id.clone(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        id
    }

    pub fn input(&mut self, id: &str, channels: usize) -> String {
        self.input = Some(id.to_string());
        self.push(id, LayerKind::Input { channels }, &[])
    }

    pub fn conv(&mut self, id: &str, src: &str, attrs: Conv2dAttrs) -> String {
        self.push(id, LayerKind::Conv2d(attrs), &[src])
    }

    pub fn bn(&mut self, id: &str, src: &str, channels: usize) -> String {
        self.push(id, LayerKind::batch_norm(channels), &[src])
    }

    pub fn relu(&mut self, id: &str, src: &str) -> String {
        self.push(id, LayerKind::ReLU, &[src])
    }

    /// conv -> batch norm -> relu, named `{id}`, `{id}_bn`, `{id}_relu`.
    pub fn conv_bn_relu(&mut self, id: &str, src: &str, attrs: Conv2dAttrs) -> String {
        let c = attrs.out_channels;
        let conv = self.conv(id, src, attrs);
        let bn = self.bn(&format!("{id}_bn"), &conv, c);
        self.relu(&format!("{id}_relu"), &bn)
    }

    pub fn add(&mut self, id: &str, srcs: &[&str]) -> String {
        self.push(id, LayerKind::Add, srcs)
    }

    pub fn concat(&mut self, id: &str, srcs: &[&str]) -> String {
        self.push(id, LayerKind::Concat { axis: 1 }, srcs)
    }

    pub fn mark_backbone_output(&mut self, id: &str) {
        self.backbone_output = Some(id.to_string());
    }

    pub fn finish(self, output: &str) -> Result<GraphDef> {
        let input = self
            .input
            .ok_or_else(|| Error::InvalidGraph("builder has no input node".into()))?;
        GraphDef::new(self.nodes, input, output, self.backbone_output)
    }
}
