//! Unstructured L1-magnitude weight pruning.
//!
//! The quantile threshold is realised as exact order statistics: with `n`
//! candidate weights and sparsity `S`, the `floor(S * n)` smallest magnitudes
//! are masked, ties broken by position (earlier layers, then lower flat
//! indices, go first). Biases and batch-norm parameters are never masked.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::footprint::count_params;
use crate::graph::ModelGraph;
use crate::mask::{Mask, MaskSet};
use crate::raster::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Local,
    Global,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Scope::Local),
            "global" => Ok(Scope::Global),
            other => Err(Error::InvalidArgument(format!("unknown scope `{other}`"))),
        }
    }
}

pub(crate) fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("sparsity must lie in [0, 1), got {s}")));
    }
    Ok(())
}

/// Number of entries removed out of `n` at sparsity `s`.
pub fn prune_count(s: f64, n: usize) -> usize {
    ((s * n as f64).floor() as usize).min(n)
}

/// Keep-flags for the concatenation of `tensors`, masking the `k` smallest
/// magnitudes with ties resolved in concatenation order.
fn smallest_k_masks(tensors: &[&[f32]], k: usize) -> Vec<Vec<bool>> {
    let mut keep: Vec<Vec<bool>> = tensors.iter().map(|t| vec![true; t.len()]).collect();
    if k == 0 {
        return keep;
    }
    let mut mags: Vec<f32> = tensors.iter().flat_map(|t| t.iter().map(|w| w.abs())).collect();
    let (_, kth, _) = mags.select_nth_unstable_by(k - 1, f32::total_cmp);
    let threshold = *kth;
    drop(mags);
    let below: usize = tensors
        .iter()
        .map(|t| t.iter().filter(|w| w.abs() < threshold).count())
        .sum();
    let mut ties_left = k - below;
    for (t, kp) in tensors.iter().zip(keep.iter_mut()) {
        for (w, flag) in t.iter().zip(kp.iter_mut()) {
            let m = w.abs();
            if m < threshold {
                *flag = false;
            } else if m == threshold && ties_left > 0 {
                *flag = false;
                ties_left -= 1;
            }
        }
    }
    keep
}

/// Prunes `floor(S * n)` weights of every prunable tensor independently.
pub fn prune_local(graph: &ModelGraph, sparsity: f64) -> Result<MaskSet> {
    check_sparsity(sparsity)?;
    let masks = graph
        .prunable_params()
        .into_iter()
        .map(|name| {
            let p = &graph.params()[name];
            let keep = smallest_k_masks(&[&p.data], prune_count(sparsity, p.len()))
                .pop()
                .unwrap();
            (name.to_string(), Mask { dims: p.dims.clone(), keep })
        })
        .collect();
    Ok(MaskSet::new(masks))
}

/// Prunes `floor(S * N)` weights against one threshold over all prunable tensors.
pub fn prune_global(graph: &ModelGraph, sparsity: f64) -> Result<MaskSet> {
    check_sparsity(sparsity)?;
    let names = graph.prunable_params();
    let tensors: Vec<&[f32]> = names.iter().map(|n| graph.params()[*n].data.as_slice()).collect();
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let keeps = smallest_k_masks(&tensors, prune_count(sparsity, total));
    let masks = names
        .into_iter()
        .zip(keeps)
        .map(|(name, keep)| {
            (name.to_string(), Mask { dims: graph.params()[name].dims.clone(), keep })
        })
        .collect();
    Ok(MaskSet::new(masks))
}

pub fn prune_weights(graph: &ModelGraph, scope: Scope, sparsity: f64) -> Result<MaskSet> {
    match scope {
        Scope::Local => prune_local(graph, sparsity),
        Scope::Global => prune_global(graph, sparsity),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub total: u64,
    pub kept: u64,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub schema: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    /// `1 - |W'| / |W|` over prunable weights.
    pub sparsity: f64,
    /// `|W| / |W'|`; `None` when every weight is masked.
    pub compression_ratio: Option<f64>,
    pub prunable_total: u64,
    pub prunable_nnz: u64,
    pub total_params: u64,
    /// Unmasked prunable weights plus every unprunable parameter.
    pub total_nnz: u64,
    /// Model bytes plus one float32 mask value per prunable weight.
    pub bytes_with_masks: u64,
    pub layers: Vec<LayerSparsity>,
}

pub fn sparsity_report(graph: &ModelGraph, masks: &MaskSet, target: Option<f64>) -> Result<SparsityReport> {
    masks.validate_for(graph)?;
    let layers: Vec<LayerSparsity> = graph
        .prunable_params()
        .into_iter()
        .map(|name| {
            let m = masks.get(name).expect("validated");
            let total = m.len() as u64;
            let kept = m.kept() as u64;
            LayerSparsity {
                name: name.to_string(),
                total,
                kept,
                sparsity: if total == 0 { 0.0 } else { 1.0 - kept as f64 / total as f64 },
            }
        })
        .collect();
    let prunable_total: u64 = layers.iter().map(|l| l.total).sum();
    let prunable_nnz: u64 = layers.iter().map(|l| l.kept).sum();
    let fp = count_params(graph);
    Ok(SparsityReport {
        schema: "segprune.sparsity/v1".into(),
        target,
        sparsity: 1.0 - prunable_nnz as f64 / prunable_total.max(1) as f64,
        compression_ratio: (prunable_nnz > 0).then(|| prunable_total as f64 / prunable_nnz as f64),
        prunable_total,
        prunable_nnz,
        total_params: fp.total_params,
        total_nnz: fp.total_params - prunable_total + prunable_nnz,
        bytes_with_masks: fp.size_bytes + 4 * prunable_total,
        layers,
    })
}

/// Sparsity for pruning run `x` (1-based): `1 - 0.5^x`.
pub fn sparsity_sequence(run_index: u32) -> Result<f64> {
    if run_index == 0 {
        return Err(Error::InvalidArgument("run index starts at 1".into()));
    }
    Ok(1.0 - 0.5f64.powi(run_index as i32))
}

/// One-shot schedule: `initial` until step `threshold_step`, `final_` after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotSchedule {
    pub initial: f64,
    pub final_: f64,
    pub threshold_step: u64,
}

impl OneShotSchedule {
    pub fn new(initial: f64, final_: f64, threshold_step: u64) -> Result<Self> {
        if !(0.0 <= initial && initial <= final_ && final_ <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "one-shot schedule needs 0 <= initial <= final <= 1, got {initial}, {final_}"
            )));
        }
        Ok(OneShotSchedule { initial, final_, threshold_step })
    }

    pub fn sparsity_at(&self, step: u64) -> f64 {
        if step > self.threshold_step {
            self.final_
        } else {
            self.initial
        }
    }
}

/// Row band of one tensor in a sparsity diagram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramBand {
    pub name: String,
    pub first_row: usize,
    pub rows: usize,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramSummary {
    pub width: usize,
    pub height: usize,
    pub bands: Vec<DiagramBand>,
}

pub const DIAGRAM_KEPT: u8 = 255;
pub const DIAGRAM_PRUNED: u8 = 0;
pub const DIAGRAM_FILL: u8 = 128;

/// Renders one pixel per prunable weight (kept = white, pruned = black).
/// Each tensor starts on a fresh row; the unused tail of its last row is grey
/// so layer boundaries stay visible.
pub fn render_sparsity_diagram(graph: &ModelGraph, masks: &MaskSet, width: usize) -> Result<(GrayImage, DiagramSummary)> {
    masks.validate_for(graph)?;
    if width == 0 {
        return Err(Error::InvalidArgument("diagram width must be >= 1".into()));
    }
    let mut pixels = Vec::new();
    let mut bands = Vec::new();
    let mut row = 0;
    for name in graph.prunable_params() {
        let m = masks.get(name).expect("validated");
        let rows = m.len().div_ceil(width);
        pixels.extend(m.keep.iter().map(|k| if *k { DIAGRAM_KEPT } else { DIAGRAM_PRUNED }));
        pixels.resize(pixels.len() + rows * width - m.len(), DIAGRAM_FILL);
        bands.push(DiagramBand {
            name: name.to_string(),
            first_row: row,
            rows,
            sparsity: 1.0 - m.kept() as f64 / m.len().max(1) as f64,
        });
        row += rows;
    }
    let img = GrayImage::new(width, row, pixels)?;
    Ok((img, DiagramSummary { width, height: row, bands }))
}

/// Writes the diagram as a binary PGM and returns its band layout.
pub fn sparsity_diagram(graph: &ModelGraph, masks: &MaskSet, path: impl AsRef<Path>, width: usize) -> Result<DiagramSummary> {
    let (img, summary) = render_sparsity_diagram(graph, masks, width)?;
    img.write_pgm(path)?;
    Ok(summary)
}

/// Per-tensor sparsity keyed by name, handy for comparisons.
pub fn layer_sparsities(report: &SparsityReport) -> BTreeMap<&str, f64> {
    report.layers.iter().map(|l| (l.name.as_str(), l.sparsity)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Conv2dAttrs, GraphBuilder, Param};
    use crate::init::init_model;

    fn with_weights(layers: &[Vec<f32>]) -> ModelGraph {
        let mut b = GraphBuilder::new();
        let mut cur = b.input("x", 1);
        for (i, w) in layers.iter().enumerate() {
            cur = b.conv(&format!("c{i}"), &cur, Conv2dAttrs::new(1, w.len(), 1));
            cur = b.conv(&format!("r{i}"), &cur, Conv2dAttrs::new(w.len(), 1, 1));
        }
        let g = init_model(b.finish(&cur).unwrap(), 0);
        let mut params = g.params().clone();
        for (i, w) in layers.iter().enumerate() {
            params.insert(format!("c{i}.weight"), Param::new(vec![w.len(), 1, 1, 1], w.clone()).unwrap());
            params.insert(format!("r{i}.weight"), Param::new(vec![1, w.len(), 1, 1], vec![100.0; w.len()]).unwrap());
        }
        g.with_params(params).unwrap()
    }

    #[test]
    fn local_two_smallest() {
        let g = with_weights(&[vec![0.1, -0.4, 0.3, 0.2]]);
        let m = prune_local(&g, 0.5).unwrap();
        assert_eq!(m.get("c0.weight").unwrap().keep, vec![false, true, true, false]);
        assert_eq!(prune_local(&g, 0.0).unwrap(), MaskSet::ones(&g));
    }

    #[test]
    fn global_takes_from_smaller_layer() {
        let g = with_weights(&[vec![10.0, 9.0], vec![1.0, 2.0, 3.0, 4.0]]);
        // 12 prunable entries (including the 100.0 readouts): prune 6, i.e.
        // the whole second layer plus the two entries of the first.
        let m = prune_global(&g, 0.5).unwrap();
        assert_eq!(m.get("c1.weight").unwrap().kept(), 0);
        assert_eq!(m.get("c0.weight").unwrap().kept(), 0);
        assert_eq!(m.get("r0.weight").unwrap().kept(), 2);
        let m = prune_global(&g, 4.0 / 12.0 + 1e-9).unwrap();
        assert_eq!(m.get("c1.weight").unwrap().kept(), 0);
        assert_eq!(m.get("c0.weight").unwrap().kept(), 2);
    }

    #[test]
    fn ties_break_by_position() {
        let g = with_weights(&[vec![1.0, -1.0, 1.0, 1.0]]);
        let m = prune_local(&g, 0.5).unwrap();
        assert_eq!(m.get("c0.weight").unwrap().keep, vec![false, false, true, true]);
    }

    #[test]
    fn report_formulas() {
        let g = with_weights(&[vec![0.1, -0.4, 0.3, 0.2]]);
        let r = sparsity_report(&g, &MaskSet::ones(&g), None).unwrap();
        assert_eq!((r.sparsity, r.compression_ratio), (0.0, Some(1.0)));
        let r = sparsity_report(&g, &prune_local(&g, 0.5).unwrap(), Some(0.5)).unwrap();
        assert_eq!((r.sparsity, r.compression_ratio), (0.5, Some(2.0)));
        assert_eq!(r.total_nnz, r.total_params - 4);
    }

    #[test]
    fn run_index_sequence() {
        assert_eq!(sparsity_sequence(1).unwrap(), 0.5);
        assert_eq!(sparsity_sequence(3).unwrap(), 0.875);
        assert_eq!(sparsity_sequence(6).unwrap(), 0.984375);
        assert!(sparsity_sequence(0).is_err());
    }

    #[test]
    fn one_shot_schedule_steps() {
        let s = OneShotSchedule::new(0.0, 0.875, 10).unwrap();
        assert_eq!(s.sparsity_at(0), 0.0);
        assert_eq!(s.sparsity_at(10), 0.0);
        assert_eq!(s.sparsity_at(11), 0.875);
        let c = OneShotSchedule::new(0.5, 0.5, 3).unwrap();
        assert!((0..10).all(|t| c.sparsity_at(t) == 0.5));
        assert!(OneShotSchedule::new(0.6, 0.5, 3).is_err());
    }

    #[test]
    fn diagram_bands() {
        let g = with_weights(&[vec![0.1, -0.4, 0.3, 0.2, 0.5]]);
        let (img, s) = render_sparsity_diagram(&g, &MaskSet::ones(&g), 4).unwrap();
        assert_eq!(s.height, 4);
        assert!(img.pixels.iter().all(|p| *p != DIAGRAM_PRUNED));
        assert_eq!(img.pixels.iter().filter(|p| **p == DIAGRAM_KEPT).count(), 10);

        let mut masks = BTreeMap::new();
        for (name, m) in MaskSet::ones(&g).iter() {
            let mut m = m.clone();
            if name == "c0.weight" {
                m.keep.fill(false);
            }
            masks.insert(name.clone(), m);
        }
        let (img, s) = render_sparsity_diagram(&g, &MaskSet::new(masks), 4).unwrap();
        let band = &s.bands[0];
        let rows = &img.pixels[band.first_row * 4..(band.first_row + band.rows) * 4];
        assert!(rows.iter().all(|p| *p != DIAGRAM_KEPT));
        assert_eq!(band.sparsity, 1.0);
    }
}
