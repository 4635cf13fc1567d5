//! Static checks for atrous-convolution misconfiguration.
//!
//! Rules:
//! - `R0` fractional output stride (warning)
//! - `R1` atrous conv reduced to pointwise (error) or with little spatial
//!   context (warning)
//! - `R2` input smaller than the minimum size the atrous rates need (error)
//! - `R3` a layer, or a set of sibling atrous branches, holding a large share
//!   of the parameters of a model with at most two output classes (info)
//!
//! Degeneration analysis assumes `pad = rate`, the usual same-size setting.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::footprint::{arch_param_count, node_param_count};
use crate::graph::{GraphDef, LayerKind, TensorShape};
use crate::shape::infer_shapes;

pub const LINT_SCHEMA: &str = "segprune.lint/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Error => "error",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LintFinding {
    pub severity: Severity,
    pub node: String,
    pub rule: String,
    pub message: String,
    pub metrics: BTreeMap<String, f64>,
}

/// A downsample factor `num / den` in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub fn new(num: usize, den: usize) -> Self {
        let g = gcd(num, den).max(1);
        Ratio { num: num / g, den: den / g }
    }

    pub fn is_integer(&self) -> bool {
        self.den == 1
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStride {
    pub h: Ratio,
    pub w: Ratio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrideProfile {
    pub nodes: BTreeMap<String, NodeStride>,
    /// The node whose stride is the output stride.
    pub backbone: String,
    pub output_stride: NodeStride,
}

/// Cumulative downsample factor of every node; the output stride is read at
/// the marked backbone output, or at the coarsest feature map when none is
/// marked.
pub fn output_stride(graph: impl AsRef<GraphDef>, input: TensorShape) -> Result<StrideProfile> {
    let g = graph.as_ref();
    let shapes = infer_shapes(g, input)?;
    let nodes: BTreeMap<String, NodeStride> = shapes
        .iter()
        .map(|(id, s)| {
            let st = NodeStride { h: Ratio::new(input.h, s.h), w: Ratio::new(input.w, s.w) };
            (id.clone(), st)
        })
        .collect();
    let backbone = match g.backbone_output() {
        Some(b) => b.to_string(),
        None => g
            .nodes()
            .iter()
            .filter(|n| !matches!(n.kind, LayerKind::GlobalAvgPool | LayerKind::Linear { .. }))
            .min_by_key(|n| shapes[&n.id].h * shapes[&n.id].w)
            .map(|n| n.id.clone())
            .ok_or_else(|| Error::InvalidGraph("graph has no nodes".into()))?,
    };
    let output_stride = nodes[&backbone];
    Ok(StrideProfile { nodes, backbone, output_stride })
}

/// Positions along an axis of size `s` whose `±rate` taps land inside the map.
pub fn context_positions(s: usize, rate: usize) -> usize {
    if rate >= s {
        0
    } else {
        2 * (s - rate) - s.saturating_sub(2 * rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degeneration {
    pub pointwise: bool,
    pub context_h: f64,
    pub context_w: f64,
    /// Fraction of output positions with any in-map non-centre tap.
    pub context_fraction: f64,
}

/// Degeneration of a `kernel`-sized conv with dilation `rate` and
/// `pad = rate` on an `h x w` map.
pub fn atrous_degeneration(h: usize, w: usize, rate: usize, kernel: usize) -> Result<Degeneration> {
    if rate == 0 || kernel.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "degeneration needs rate >= 1, odd kernel and a non-empty map, got rate {rate}, kernel {kernel}, map {h}x{w}"
        )));
    }
    if kernel == 1 {
        return Ok(Degeneration { pointwise: true, context_h: 0.0, context_w: 0.0, context_fraction: 0.0 });
    }
    let fh = context_positions(h, rate) as f64 / h as f64;
    let fw = context_positions(w, rate) as f64 / w as f64;
    Ok(Degeneration {
        pointwise: rate >= h.max(w),
        context_h: fh,
        context_w: fw,
        context_fraction: 1.0 - (1.0 - fh) * (1.0 - fw),
    })
}

/// Smallest square input for which every rate fits inside the encoded map.
pub fn min_input_size(rates: &[usize], output_stride: usize) -> Result<usize> {
    match rates.iter().max() {
        Some(&r) if output_stride >= 1 => Ok(r * output_stride),
        _ => Err(Error::InvalidArgument("min input size needs rates and an output stride >= 1".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LintConfig {
    /// R1 warns below this joint context fraction.
    pub context_threshold: f64,
    /// R3 fires above this parameter share.
    pub param_share: f64,
}

impl Default for LintConfig {
    fn default() -> Self {
        LintConfig { context_threshold: 0.5, param_share: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LintReport {
    pub schema: String,
    pub input: [usize; 2],
    pub output_stride: NodeStride,
    pub backbone: String,
    pub atrous_rates: Vec<usize>,
    pub min_input_size: Option<usize>,
    pub findings: Vec<LintFinding>,
}

impl LintReport {
    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "input {}x{}, output stride {} at `{}`",
            self.input[0], self.input[1], self.output_stride.h, self.backbone
        );
        if let Some(m) = self.min_input_size {
            s.push_str(&format!(", minimum input {m}x{m}"));
        }
        s.push('\n');
        for f in &self.findings {
            s.push_str(&format!("{:<7} {} {}: {}\n", f.severity, f.rule, f.node, f.message));
        }
        if self.findings.is_empty() {
            s.push_str("no findings\n");
        }
        s
    }
}

fn finding(severity: Severity, node: &str, rule: &str, message: String, metrics: &[(&str, f64)]) -> LintFinding {
    LintFinding {
        severity,
        node: node.to_string(),
        rule: rule.to_string(),
        message,
        metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

pub fn lint(graph: impl AsRef<GraphDef>, input: TensorShape) -> Result<LintReport> {
    lint_with(graph, input, &LintConfig::default())
}

pub fn lint_with(graph: impl AsRef<GraphDef>, input: TensorShape, cfg: &LintConfig) -> Result<LintReport> {
    let g = graph.as_ref();
    let shapes = infer_shapes(g, input)?;
    let profile = output_stride(g, input)?;
    let mut out = Vec::new();

    let os = profile.output_stride;
    if !os.h.is_integer() || !os.w.is_integer() {
        out.push(finding(
            Severity::Warning,
            &profile.backbone,
            "R0",
            format!("fractional output stride {} x {}", os.h, os.w),
            &[("output_stride_h", os.h.value()), ("output_stride_w", os.w.value())],
        ));
    }

    // R1 on every spatial stride-1 conv.
    for node in g.nodes() {
        let LayerKind::Conv2d(a) = &node.kind else { continue };
        if a.kernel_h != a.kernel_w || a.kernel_h == 1 || a.stride != 1 {
            continue;
        }
        let map = shapes[&node.inputs[0]];
        let d = atrous_degeneration(map.h, map.w, a.dilation, a.kernel_h)?;
        let metrics = [
            ("rate", a.dilation as f64),
            ("map_h", map.h as f64),
            ("map_w", map.w as f64),
            ("context_h", d.context_h),
            ("context_w", d.context_w),
            ("context_fraction", d.context_fraction),
        ];
        if d.pointwise {
            out.push(finding(
                Severity::Error,
                &node.id,
                "R1",
                format!(
                    "rate {} on a {}x{} map: every off-centre tap reads padding, the conv is pointwise",
                    a.dilation, map.h, map.w
                ),
                &metrics,
            ));
        } else if d.context_fraction < cfg.context_threshold {
            out.push(finding(
                Severity::Warning,
                &node.id,
                "R1",
                format!(
                    "rate {} on a {}x{} map: only {:.1}% of positions see any off-centre input ({}/{} per axis)",
                    a.dilation,
                    map.h,
                    map.w,
                    100.0 * d.context_fraction,
                    context_positions(map.h, a.dilation),
                    map.h
                ),
                &metrics,
            ));
        }
    }

    // R2 on the atrous convs reading the backbone output.
    let head: Vec<(&str, usize)> = g
        .nodes()
        .iter()
        .filter_map(|n| match &n.kind {
            LayerKind::Conv2d(a) if a.dilation > 1 && n.inputs[0] == profile.backbone => Some((n.id.as_str(), a.dilation)),
            _ => None,
        })
        .collect();
    let rates: Vec<usize> = head.iter().map(|&(_, r)| r).collect();
    let min_input = if rates.is_empty() {
        None
    } else {
        let stride = os.h.value().ceil().max(1.0) as usize;
        Some(min_input_size(&rates, stride)?)
    };
    if let Some(m) = min_input {
        let smallest = input.h.min(input.w);
        if smallest < m {
            let (node, rate) = head.iter().max_by_key(|&&(id, r)| (r, std::cmp::Reverse(id))).copied().unwrap();
            out.push(finding(
                Severity::Error,
                node,
                "R2",
                format!("input {}x{} is below the {m}x{m} needed by rate {rate} at output stride {}", input.h, input.w, os.h),
                &[("min_input", m as f64), ("input", smallest as f64)],
            ));
        }
    }

    // R3: head capacity on binary tasks.
    let classes = shapes[g.output_id()].c;
    let total = arch_param_count(g) as f64;
    if classes <= 2 && total > 0.0 {
        for node in g.nodes() {
            let share = node_param_count(node) as f64 / total;
            if share > cfg.param_share {
                out.push(finding(
                    Severity::Info,
                    &node.id,
                    "R3",
                    format!("{:.1}% of all parameters for {classes} output class(es)", 100.0 * share),
                    &[("param_share", share), ("classes", classes as f64)],
                ));
            }
        }
        let mut siblings: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for node in g.nodes() {
            if let LayerKind::Conv2d(a) = &node.kind {
                if a.dilation > 1 {
                    siblings.entry(node.inputs[0].as_str()).or_default().push(&node.id);
                }
            }
        }
        for ids in siblings.values().filter(|v| v.len() > 1) {
            let params: u64 = ids.iter().map(|id| node_param_count(g.node(id).unwrap())).sum();
            let share = params as f64 / total;
            if share > cfg.param_share {
                out.push(finding(
                    Severity::Info,
                    ids[0],
                    "R3",
                    format!(
                        "{} sibling atrous branches hold {:.1}% of all parameters for {classes} output class(es)",
                        ids.len(),
                        100.0 * share
                    ),
                    &[("param_share", share), ("branches", ids.len() as f64), ("classes", classes as f64)],
                ));
            }
        }
    }

    out.sort_by(|a, b| (&a.node, &a.rule).cmp(&(&b.node, &b.rule)));
    Ok(LintReport {
        schema: LINT_SCHEMA.into(),
        input: [input.h, input.w],
        output_stride: os,
        backbone: profile.backbone,
        atrous_rates: rates,
        min_input_size: min_input,
        findings: out,
    })
}
