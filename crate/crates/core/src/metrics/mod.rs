//! Segmentation quality metrics and evaluation over datasets.

mod distance;
pub mod eval;
pub mod noise;
pub mod synth;
pub mod trend;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster;

pub use distance::{ahd, boundary};
pub use eval::{evaluate, EvalReport, MetricSummary};
pub use noise::apply_noise;
pub use synth::{generate, Dataset, Sample, SynthKind, SynthSpec};
pub use trend::{area_trend, AreaTrend};

/// Row-major binary mask, `true` = foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::InvalidArgument(format!(
                "{h}x{w} mask needs {} bits, got {}",
                h * w,
                bits.len()
            )));
        }
        Ok(BinaryMask { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask { h, w, bits: vec![false; h * w] }
    }

    /// Thresholds logits at probability 0.5 (logit > 0).
    pub fn from_logits(h: usize, w: usize, logits: &[f32]) -> Result<Self> {
        BinaryMask::new(h, w, logits.iter().map(|z| *z > 0.0).collect())
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn write_pbm(&self, path: impl AsRef<Path>) -> Result<()> {
        raster::BitImage::new(self.w, self.h, self.bits.clone())?.write_pbm(path)
    }

    pub fn read_pbm(path: impl AsRef<Path>) -> Result<Self> {
        let img = raster::BitImage::read_pbm(path)?;
        BinaryMask::new(img.height, img.width, img.bits)
    }

    /// Number of 4-connected foreground components.
    pub fn components(&self) -> usize {
        let mut seen = vec![false; self.bits.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (y, x) = (i / self.w, i % self.w);
                let mut visit = |j: usize| {
                    if self.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    visit(i - self.w);
                }
                if y + 1 < self.h {
                    visit(i + self.w);
                }
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < self.w {
                    visit(i + 1);
                }
            }
        }
        count
    }
}

pub(crate) fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::InvalidArgument(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    Ok(())
}

/// Pixel confusion counts of a prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        check_dims(pred, gt)?;
        let mut c = Confusion::default();
        for (p, g) in pred.bits.iter().zip(&gt.bits) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }

    /// `2|A∩B| / (|A| + |B|)`; 1.0 when both masks are empty.
    pub fn dice(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// `|A∩B| / |A∪B|`; 1.0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// True-positive rate; 1.0 when the ground truth is empty.
    pub fn sensitivity(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// True-negative rate; 1.0 when the ground truth covers every pixel.
    pub fn specificity(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp)
    }
}

pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.dice())
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.iou())
}

pub fn sensitivity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.sensitivity())
}

pub fn specificity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.specificity())
}

/// ROC area by the trapezoid rule over every distinct score threshold.
pub fn auc(scores: &[f32], gt: &BinaryMask) -> Result<f64> {
    if scores.len() != gt.bits.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for a {}-pixel mask",
            scores.len(),
            gt.bits.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let pos = gt.count() as f64;
    let neg = gt.bits.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both foreground and background pixels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if gt.bits[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - prev_fp) * (tp + prev_tp) / 2.0;
    }
    Ok(area / (pos * neg))
}

/// All six metrics for one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub dice: f64,
    pub iou: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// `None` when the ground truth is single-class.
    pub auc: Option<f64>,
    /// `None` when either mask is empty.
    pub ahd: Option<f64>,
}

impl MetricSet {
    pub fn compute(scores: &[f32], pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        let c = Confusion::of(pred, gt)?;
        let auc = match auc(scores, gt) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let ahd = if pred.count() > 0 && gt.count() > 0 { Some(ahd(pred, gt)?) } else { None };
        Ok(MetricSet {
            dice: c.dice(),
            iou: c.iou(),
            sensitivity: c.sensitivity(),
            specificity: c.specificity(),
            auc,
            ahd,
        })
    }
}

pub const DIFF_FALSE_NEGATIVE: [u8; 3] = [255, 0, 0];
pub const DIFF_FALSE_POSITIVE: [u8; 3] = [0, 255, 0];
pub const DIFF_TRUE_POSITIVE: [u8; 3] = [255, 255, 255];
pub const DIFF_TRUE_NEGATIVE: [u8; 3] = [0, 0, 0];

/// Red where the ground truth is missed, green where the prediction
/// overshoots, white on agreement, black on background.
pub fn render_difference(pred: &BinaryMask, gt: &BinaryMask) -> Result<Vec<[u8; 3]>> {
    check_dims(pred, gt)?;
    Ok(pred
        .bits
        .iter()
        .zip(&gt.bits)
        .map(|(p, g)| match (p, g) {
            (false, true) => DIFF_FALSE_NEGATIVE,
            (true, false) => DIFF_FALSE_POSITIVE,
            (true, true) => DIFF_TRUE_POSITIVE,
            (false, false) => DIFF_TRUE_NEGATIVE,
        })
        .collect())
}

/// Writes [`render_difference`] as a binary PPM.
pub fn difference_image(pred: &BinaryMask, gt: &BinaryMask, path: impl AsRef<Path>) -> Result<Vec<[u8; 3]>> {
    let rgb = render_difference(pred, gt)?;
    raster::write_ppm(path, pred.w, pred.h, &rgb)?;
    Ok(rgb)
}
