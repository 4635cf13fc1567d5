//! Structured filter pruning.
//!
//! Every conv filter is scored by its group norm, each layer drops the same
//! fraction of its lowest-scored filters, and the graph is rewritten into a
//! dense network with fewer channels. Convs whose outputs meet at an `Add`
//! must keep identical channels, so they form a dependency group whose kept
//! set is the union of its members' choices.
//!
//! Channel provenance is tracked as a list of segments per node output: a
//! conv starts one segment, pass-through layers (BN, ReLU, pooling,
//! upsampling) forward their input's segments, `Concat` appends them and
//! `Add` merges corresponding segments into one group.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::footprint::count_params;
use crate::graph::{GraphDef, LayerKind, LayerNode, ModelGraph, Param};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    pub layer: String,
    pub scores: Vec<f64>,
}

/// `(Σ |w|^p)^(1/p)` over one filter.
pub fn group_norm(weights: &[f32], p: f64) -> f64 {
    if p == 1.0 {
        weights.iter().map(|w| (*w as f64).abs()).sum()
    } else if p == 2.0 {
        weights.iter().map(|w| (*w as f64).powi(2)).sum::<f64>().sqrt()
    } else {
        weights.iter().map(|w| (*w as f64).abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Per-filter norms for every conv in node order.
pub fn filter_saliency(graph: &ModelGraph, p: f64) -> Result<Vec<FilterScore>> {
    if !(p.is_finite() && p > 0.0) {
        return Err(Error::InvalidArgument(format!("norm order must be positive, got {p}")));
    }
    let mut out = Vec::new();
    for node in graph.nodes() {
        if let LayerKind::Conv2d(a) = &node.kind {
            if a.groups != 1 {
                return Err(unsupported_grouped(node));
            }
            let w = &graph.params()[&node.weight_name()].data;
            let scores = w.chunks_exact(a.filter_len()).map(|f| group_norm(f, p)).collect();
            out.push(FilterScore { layer: node.id.clone(), scores });
        }
    }
    Ok(out)
}

fn unsupported_grouped(node: &LayerNode) -> Error {
    Error::UnsupportedLayer {
        node: node.id.clone(),
        detail: "grouped convolutions cannot be filter-pruned".into(),
    }
}

/// Kept filter indices (ascending) after dropping the `floor(S * n)`
/// lowest-scored filters, ties resolved by index. At least one filter stays.
pub fn select_filters(scores: &[f64], sparsity: f64) -> Vec<usize> {
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    let remove = ((sparsity * n as f64).floor() as usize).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..n - remove].to_vec();
    kept.sort_unstable();
    kept
}

/// Producer convs whose output channels are coupled, plus the layers reading them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGroup {
    pub producers: Vec<String>,
    pub consumers: Vec<String>,
    pub channels: usize,
    /// Groups touching the graph input or output are never pruned.
    pub fixed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Segment {
    /// Node index of the producer that created these channels.
    source: usize,
    len: usize,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            // Keep the earliest producer as representative.
            let (lo, hi) = (a.min(b), a.max(b));
            self.0[hi] = lo;
        }
    }
}

/// Channel provenance for every node, with sources resolved to group roots.
struct Analysis {
    layouts: Vec<Vec<Segment>>,
    roots: Vec<usize>,
    fixed: BTreeSet<usize>,
}

fn analyse(arch: &GraphDef) -> Result<Analysis> {
    let nodes = arch.nodes();
    let mut uf = UnionFind((0..nodes.len()).collect());
    let mut layouts: Vec<Vec<Segment>> = Vec::with_capacity(nodes.len());
    let mut fixed_sources = Vec::new();
    let pos = |id: &str| arch.position(id).expect("validated");
    for (i, node) in nodes.iter().enumerate() {
        let layout = match &node.kind {
            LayerKind::Input { channels } => {
                fixed_sources.push(i);
                vec![Segment { source: i, len: *channels }]
            }
            LayerKind::Conv2d(a) => {
                if a.groups != 1 {
                    return Err(unsupported_grouped(node));
                }
                vec![Segment { source: i, len: a.out_channels }]
            }
            LayerKind::Linear { out_features, .. } => {
                fixed_sources.push(i);
                vec![Segment { source: i, len: *out_features }]
            }
            LayerKind::BatchNorm2d { .. }
            | LayerKind::ReLU
            | LayerKind::MaxPool2d { .. }
            | LayerKind::GlobalAvgPool
            | LayerKind::BilinearUpsample { .. } => layouts[pos(&node.inputs[0])].clone(),
            LayerKind::Concat { .. } => node
                .inputs
                .iter()
                .flat_map(|s| layouts[pos(s)].iter().copied())
                .collect(),
            LayerKind::Add => {
                let first = layouts[pos(&node.inputs[0])].clone();
                for other in &node.inputs[1..] {
                    let segs = &layouts[pos(other)];
                    let same = segs.len() == first.len()
                        && segs.iter().zip(&first).all(|(a, b)| a.len == b.len);
                    if !same {
                        return Err(Error::UnsupportedTopology {
                            node: node.id.clone(),
                            detail: format!(
                                "inputs `{}` and `{other}` carry differently segmented channels",
                                node.inputs[0]
                            ),
                        });
                    }
                    for (a, b) in segs.iter().zip(&first) {
                        uf.union(a.source, b.source);
                    }
                }
                first
            }
        };
        layouts.push(layout);
    }
    fixed_sources.extend(layouts[pos(arch.output_id())].iter().map(|s| s.source));
    let roots: Vec<usize> = (0..nodes.len()).map(|i| uf.find(i)).collect();
    let fixed = fixed_sources.into_iter().map(|s| roots[s]).collect();
    Ok(Analysis { layouts, roots, fixed })
}

/// Partitions the producer convs into coupled groups (in order of their
/// first member).
pub fn build_dependency_groups(arch: &GraphDef) -> Result<Vec<DependencyGroup>> {
    let a = analyse(arch)?;
    let nodes = arch.nodes();
    let mut groups: BTreeMap<usize, DependencyGroup> = BTreeMap::new();
    for (i, node) in nodes.iter().enumerate() {
        if let LayerKind::Conv2d(c) = &node.kind {
            let g = groups.entry(a.roots[i]).or_insert_with(|| DependencyGroup {
                producers: Vec::new(),
                consumers: Vec::new(),
                channels: c.out_channels,
                fixed: a.fixed.contains(&a.roots[i]),
            });
            g.producers.push(node.id.clone());
        }
    }
    for (i, node) in nodes.iter().enumerate() {
        if !matches!(node.kind, LayerKind::Conv2d(_) | LayerKind::Linear { .. }) {
            continue;
        }
        let src = arch.position(&node.inputs[0]).unwrap();
        let mut seen = BTreeSet::new();
        for seg in &a.layouts[src] {
            let root = a.roots[seg.source];
            if seen.insert(root) {
                if let Some(g) = groups.get_mut(&root) {
                    g.consumers.push(nodes[i].id.clone());
                }
            }
        }
    }
    Ok(groups.into_values().collect())
}

/// Kept output filters per conv, plus the group-level view.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    /// Conv id → kept filter indices, ascending.
    pub layers: BTreeMap<String, Vec<usize>>,
    pub groups: Vec<GroupPlan>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub producers: Vec<String>,
    pub channels: usize,
    pub kept: Vec<usize>,
}

impl ChannelPlan {
    /// Keeps every filter.
    pub fn identity(arch: &GraphDef) -> Result<Self> {
        let groups = build_dependency_groups(arch)?;
        Ok(Self::from_group_sets(groups.iter().map(|g| (g, (0..g.channels).collect()))))
    }

    fn from_group_sets<'a>(sets: impl Iterator<Item = (&'a DependencyGroup, Vec<usize>)>) -> Self {
        let mut layers = BTreeMap::new();
        let mut groups = Vec::new();
        for (g, kept) in sets {
            for p in &g.producers {
                layers.insert(p.clone(), kept.clone());
            }
            groups.push(GroupPlan { producers: g.producers.clone(), channels: g.channels, kept });
        }
        ChannelPlan { layers, groups }
    }

    pub fn kept_filters(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }
}

/// How the members of a dependency group agree on one kept set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// A channel survives if any member keeps it.
    #[default]
    Union,
    /// A channel survives only if every member keeps it (at least the
    /// best-scoring channel by summed norm is retained).
    Intersection,
    /// Member norms are summed per channel and the group is ranked as one
    /// layer, so it keeps exactly as many channels as a lone layer would.
    GroupNorm,
}

impl std::str::FromStr for MergeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(MergeRule::Union),
            "intersection" => Ok(MergeRule::Intersection),
            "group-norm" | "group_norm" => Ok(MergeRule::GroupNorm),
            other => Err(Error::InvalidArgument(format!("unknown merge rule `{other}`"))),
        }
    }
}

fn merge_group(members: &[&Vec<f64>], sparsity: f64, rule: MergeRule) -> Vec<usize> {
    let summed = || -> Vec<f64> {
        (0..members[0].len()).map(|c| members.iter().map(|m| m[c]).sum()).collect()
    };
    if members.len() == 1 {
        return select_filters(members[0], sparsity);
    }
    match rule {
        MergeRule::Union => {
            let mut kept = BTreeSet::new();
            for m in members {
                kept.extend(select_filters(m, sparsity));
            }
            kept.into_iter().collect()
        }
        MergeRule::Intersection => {
            let mut kept: BTreeSet<usize> = select_filters(members[0], sparsity).into_iter().collect();
            for m in &members[1..] {
                let other: BTreeSet<usize> = select_filters(m, sparsity).into_iter().collect();
                kept = kept.intersection(&other).copied().collect();
            }
            if kept.is_empty() {
                select_filters(&summed(), 1.0)
            } else {
                kept.into_iter().collect()
            }
        }
        MergeRule::GroupNorm => select_filters(&summed(), sparsity),
    }
}

/// Per-layer selection at fraction `S`, merged within each group by
/// `rule`. Fixed groups keep everything.
pub fn plan_filters(graph: &ModelGraph, sparsity: f64, p: f64, rule: MergeRule) -> Result<ChannelPlan> {
    crate::prune::weight::check_sparsity(sparsity)?;
    let scores: BTreeMap<String, Vec<f64>> = filter_saliency(graph, p)?
        .into_iter()
        .map(|f| (f.layer, f.scores))
        .collect();
    let groups = build_dependency_groups(graph.arch())?;
    let sets: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| {
            if g.fixed {
                return (0..g.channels).collect();
            }
            let members: Vec<&Vec<f64>> = g.producers.iter().map(|m| &scores[m]).collect();
            merge_group(&members, sparsity, rule)
        })
        .collect();
    Ok(ChannelPlan::from_group_sets(groups.iter().zip(sets)))
}

/// Checks coverage, bounds and per-group agreement.
fn check_plan(arch: &GraphDef, plan: &ChannelPlan) -> Result<Analysis> {
    let a = analyse(arch)?;
    let mut by_root: BTreeMap<usize, (&str, &Vec<usize>)> = BTreeMap::new();
    for (i, node) in arch.nodes().iter().enumerate() {
        let LayerKind::Conv2d(c) = &node.kind else { continue };
        let kept = plan
            .layers
            .get(&node.id)
            .ok_or_else(|| Error::InconsistentPlan(format!("no kept set for conv `{}`", node.id)))?;
        if kept.is_empty() {
            return Err(Error::InconsistentPlan(format!("conv `{}` keeps no filters", node.id)));
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) || *kept.last().unwrap() >= c.out_channels {
            return Err(Error::InconsistentPlan(format!(
                "kept set of `{}` must be strictly ascending indices below {}",
                node.id, c.out_channels
            )));
        }
        let root = a.roots[i];
        if a.fixed.contains(&root) && kept.len() != c.out_channels {
            return Err(Error::InconsistentPlan(format!(
                "conv `{}` feeds the graph output and cannot lose filters",
                node.id
            )));
        }
        match by_root.get(&root) {
            Some((other, k)) if *k != kept => {
                return Err(Error::InconsistentPlan(format!(
                    "`{}` and `{other}` share channels but keep different filters",
                    node.id
                )))
            }
            Some(_) => {}
            None => {
                by_root.insert(root, (&node.id, kept));
            }
        }
    }
    Ok(a)
}

/// Channel indices of a node's output that survive the plan.
fn kept_channels(arch: &GraphDef, a: &Analysis, plan: &ChannelPlan, layout: &[Segment]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for seg in layout {
        let src = &arch.nodes()[seg.source];
        match plan.layers.get(&src.id) {
            Some(kept) if matches!(src.kind, LayerKind::Conv2d(_)) => {
                out.extend(kept.iter().map(|k| offset + k));
            }
            _ => {
                debug_assert!(a.fixed.contains(&a.roots[seg.source]) || !matches!(src.kind, LayerKind::Conv2d(_)));
                out.extend(offset..offset + seg.len);
            }
        }
        offset += seg.len;
    }
    out
}

fn gather(data: &[f32], idx: &[usize], stride: usize) -> Vec<f32> {
    idx.iter().flat_map(|&i| data[i * stride..(i + 1) * stride].iter().copied()).collect()
}

/// Emits the dense graph that keeps only the planned channels.
pub fn rewrite(graph: &ModelGraph, plan: &ChannelPlan) -> Result<ModelGraph> {
    let arch = graph.arch();
    let a = check_plan(arch, plan)?;
    let kept: Vec<Vec<usize>> = a
        .layouts
        .iter()
        .map(|l| kept_channels(arch, &a, plan, l))
        .collect();
    let pos = |id: &str| arch.position(id).expect("validated");
    let mut nodes = Vec::with_capacity(arch.nodes().len());
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for (i, node) in arch.nodes().iter().enumerate() {
        let mut node_out = node.clone();
        let p = |s: &str| &graph.params()[&format!("{}.{s}", node.id)];
        match &node.kind {
            LayerKind::Conv2d(c) => {
                let out_idx = &kept[i];
                let in_idx = &kept[pos(&node.inputs[0])];
                let k = c.kernel_h * c.kernel_w;
                let w = &p("weight").data;
                let mut data = Vec::with_capacity(out_idx.len() * in_idx.len() * k);
                for &o in out_idx {
                    let filter = &w[o * c.in_channels * k..(o + 1) * c.in_channels * k];
                    data.extend(gather(filter, in_idx, k));
                }
                let mut attrs = c.clone();
                attrs.out_channels = out_idx.len();
                attrs.in_channels = in_idx.len();
                params.insert(
                    node.weight_name(),
                    Param::new(vec![out_idx.len(), in_idx.len(), c.kernel_h, c.kernel_w], data)?,
                );
                if c.has_bias {
                    params.insert(node.bias_name(), Param::new(vec![out_idx.len()], gather(&p("bias").data, out_idx, 1))?);
                }
                node_out.kind = LayerKind::Conv2d(attrs);
            }
            LayerKind::BatchNorm2d { epsilon, .. } => {
                let idx = &kept[i];
                for s in ["weight", "bias"] {
                    params.insert(format!("{}.{s}", node.id), Param::new(vec![idx.len()], gather(&p(s).data, idx, 1))?);
                }
                for s in ["running_mean", "running_var"] {
                    let name = format!("{}.{s}", node.id);
                    let b = &graph.buffers()[&name];
                    buffers.insert(name, Param::new(vec![idx.len()], gather(&b.data, idx, 1))?);
                }
                let name = format!("{}.num_batches_tracked", node.id);
                buffers.insert(name.clone(), graph.buffers()[&name].clone());
                node_out.kind = LayerKind::BatchNorm2d { channels: idx.len(), epsilon: *epsilon };
            }
            LayerKind::Linear { in_features, out_features, has_bias } => {
                let src = pos(&node.inputs[0]);
                let channels: usize = a.layouts[src].iter().map(|s| s.len).sum();
                let per = in_features / channels;
                let cols: Vec<usize> = kept[src].iter().flat_map(|c| c * per..(c + 1) * per).collect();
                let w = &p("weight").data;
                let data = (0..*out_features)
                    .flat_map(|o| cols.iter().map(move |&j| w[o * in_features + j]))
                    .collect();
                params.insert(node.weight_name(), Param::new(vec![*out_features, cols.len()], data)?);
                if *has_bias {
                    params.insert(node.bias_name(), p("bias").clone());
                }
                node_out.kind = LayerKind::Linear {
                    in_features: cols.len(),
                    out_features: *out_features,
                    has_bias: *has_bias,
                };
            }
            _ => {}
        }
        nodes.push(node_out);
    }
    let arch = GraphDef::new(
        nodes,
        arch.input_id(),
        arch.output_id(),
        arch.backbone_output().map(str::to_string),
    )?;
    ModelGraph::new(arch, params, buffers)
}

/// The same model with every pruned filter silenced in place: conv weights
/// and biases of pruned filters and the affine terms of batch norms on
/// pruned channels are zeroed. Its outputs equal those of [`rewrite`].
pub fn zero_pruned(graph: &ModelGraph, plan: &ChannelPlan) -> Result<ModelGraph> {
    let arch = graph.arch();
    let a = check_plan(arch, plan)?;
    let mut params = graph.params().clone();
    for (i, node) in arch.nodes().iter().enumerate() {
        let layout = &a.layouts[i];
        let total: usize = layout.iter().map(|s| s.len).sum();
        let keep: BTreeSet<usize> = kept_channels(arch, &a, plan, layout).into_iter().collect();
        let dropped: Vec<usize> = (0..total).filter(|c| !keep.contains(c)).collect();
        if dropped.is_empty() {
            continue;
        }
        match &node.kind {
            LayerKind::Conv2d(c) => {
                let w = params.get_mut(&node.weight_name()).unwrap();
                let len = c.filter_len();
                for &o in &dropped {
                    w.data[o * len..(o + 1) * len].fill(0.0);
                }
                if let Some(b) = params.get_mut(&node.bias_name()) {
                    for &o in &dropped {
                        b.data[o] = 0.0;
                    }
                }
            }
            LayerKind::BatchNorm2d { .. } => {
                for s in ["weight", "bias"] {
                    let t = params.get_mut(&format!("{}.{s}", node.id)).unwrap();
                    for &o in &dropped {
                        t.data[o] = 0.0;
                    }
                }
            }
            _ => {}
        }
    }
    graph.with_params(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFilters {
    pub layer: String,
    pub before: usize,
    pub after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterPruneReport {
    pub schema: String,
    pub fraction: f64,
    pub norm: f64,
    pub merge: MergeRule,
    pub params_before: u64,
    pub params_after: u64,
    pub compression_ratio: f64,
    /// `1 - params_after / params_before`.
    pub sparsity: f64,
    pub layers: Vec<LayerFilters>,
    pub plan: ChannelPlan,
}

/// Saliency, per-layer selection, group merge and rewrite in one call.
pub fn prune_filters(
    graph: &ModelGraph,
    sparsity: f64,
    p: f64,
    rule: MergeRule,
) -> Result<(ModelGraph, FilterPruneReport)> {
    let plan = plan_filters(graph, sparsity, p, rule)?;
    let pruned = rewrite(graph, &plan)?;
    let before = count_params(graph).total_params;
    let after = count_params(&pruned).total_params;
    let layers = graph
        .nodes()
        .iter()
        .filter_map(|n| match &n.kind {
            LayerKind::Conv2d(c) => Some(LayerFilters {
                layer: n.id.clone(),
                before: c.out_channels,
                after: plan.layers[&n.id].len(),
            }),
            _ => None,
        })
        .collect();
    let report = FilterPruneReport {
        schema: "segprune.filter-prune/v1".into(),
        fraction: sparsity,
        norm: p,
        merge: rule,
        params_before: before,
        params_after: after,
        compression_ratio: before as f64 / after as f64,
        sparsity: 1.0 - after as f64 / before as f64,
        layers,
        plan,
    };
    Ok((pruned, report))
}
