//! Dataset-level evaluation of a binary segmentation model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::graph::ModelGraph;
use crate::mask::MaskSet;

use super::{apply_noise, BinaryMask, Dataset, MetricSet};

/// Mean over samples with a normal-approximation margin `1.96 * sd / sqrt(n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub margin95: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let margin95 = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(MetricSummary { mean, margin95, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub samples: usize,
    pub noise_ratio: f64,
    pub noise_seed: u64,
    pub dice: MetricSummary,
    pub iou: MetricSummary,
    pub sensitivity: MetricSummary,
    pub specificity: MetricSummary,
    /// Over samples whose ground truth has both classes.
    pub auc: Option<MetricSummary>,
    /// Over samples where prediction and ground truth are both non-empty.
    pub ahd: Option<MetricSummary>,
    pub per_sample_dice: Vec<f64>,
}

const EVAL_BATCH: usize = 16;

/// Runs the model over `data` (inference mode) and scores each prediction
/// thresholded at probability 0.5. With `noise = Some((ratio, seed))` every
/// input first loses that fraction of pixels; sample `i` uses stream `i`.
pub fn evaluate(
    graph: &ModelGraph,
    masks: Option<&MaskSet>,
    data: &Dataset,
    noise: Option<(f64, u64)>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let (ratio, seed) = noise.unwrap_or((0.0, 0));
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("noise ratio must lie in [0, 1], got {ratio}")));
    }
    let mut exec = Executor::new();
    let mut sets = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut batch = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let img = &data.samples[i].image;
            batch.push(if ratio > 0.0 {
                noisy_sample(img, ratio, seed, i as u64)
            } else {
                img.clone()
            });
        }
        let refs: Vec<_> = batch.iter().collect();
        let x = crate::tensor::Tensor::stack(&refs)?;
        let y = exec.forward(graph, &x, masks)?;
        if y.shape.c != 1 {
            return Err(Error::InvalidArgument(format!(
                "evaluation expects a single-channel logit map, model emits {} channels",
                y.shape.c
            )));
        }
        for (k, &i) in chunk.iter().enumerate() {
            let gt = &data.samples[i].mask;
            let logits = y.sample(k);
            let pred = BinaryMask::from_logits(y.shape.h, y.shape.w, logits)?;
            sets.push(MetricSet::compute(logits, &pred, gt)?);
        }
    }
    let col = |f: &dyn Fn(&MetricSet) -> Option<f64>| -> Vec<f64> { sets.iter().filter_map(f).collect() };
    let dice = col(&|m| Some(m.dice));
    Ok(EvalReport {
        schema: "segprune.eval/v1".into(),
        samples: data.len(),
        noise_ratio: ratio,
        noise_seed: seed,
        dice: MetricSummary::of(&dice).expect("non-empty"),
        iou: MetricSummary::of(&col(&|m| Some(m.iou))).expect("non-empty"),
        sensitivity: MetricSummary::of(&col(&|m| Some(m.sensitivity))).expect("non-empty"),
        specificity: MetricSummary::of(&col(&|m| Some(m.specificity))).expect("non-empty"),
        auc: MetricSummary::of(&col(&|m| m.auc)),
        ahd: MetricSummary::of(&col(&|m| m.ahd)),
        per_sample_dice: dice,
    })
}

/// Noise for dataset sample `index`, independent of batching.
fn noisy_sample(img: &crate::tensor::Tensor, ratio: f64, seed: u64, index: u64) -> crate::tensor::Tensor {
    let mixed = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    apply_noise(img, ratio, mixed)
}

/// Mean DICE only, for validation during training.
pub fn mean_dice(graph: &ModelGraph, masks: Option<&MaskSet>, data: &Dataset) -> Result<f64> {
    Ok(evaluate(graph, masks, data, None)?.dice.mean)
}
