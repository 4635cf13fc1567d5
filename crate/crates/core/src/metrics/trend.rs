//! Per-frame area curves and their extrema.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::BinaryMask;

pub const TREND_WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaTrend {
    pub areas: Vec<u64>,
    pub smoothed: Vec<f64>,
    /// Strict local maxima of the smoothed curve (largest-area frames).
    pub peaks: Vec<usize>,
    /// Strict local minima of the smoothed curve (smallest-area frames).
    pub valleys: Vec<usize>,
}

/// Centered moving average; the window is truncated at the ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub fn area_trend(frames: &[BinaryMask]) -> Result<AreaTrend> {
    if frames.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "area trend needs at least 3 frames, got {}",
            frames.len()
        )));
    }
    let areas: Vec<u64> = frames.iter().map(|f| f.count() as u64).collect();
    let raw: Vec<f64> = areas.iter().map(|a| *a as f64).collect();
    let smoothed = moving_average(&raw, TREND_WINDOW);
    let mut peaks = Vec::new();
    let mut valleys = Vec::new();
    for i in 1..smoothed.len() - 1 {
        let (prev, cur, next) = (smoothed[i - 1], smoothed[i], smoothed[i + 1]);
        if cur > prev && cur > next {
            peaks.push(i);
        } else if cur < prev && cur < next {
            valleys.push(i);
        }
    }
    Ok(AreaTrend { areas, smoothed, peaks, valleys })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(areas: &[usize]) -> Vec<BinaryMask> {
        areas
            .iter()
            .map(|&a| {
                let mut m = BinaryMask::empty(20, 20);
                m.bits[..a].fill(true);
                m
            })
            .collect()
    }

    #[test]
    fn flat_and_ramp_have_no_extrema() {
        let t = area_trend(&frames(&[50; 12])).unwrap();
        assert!(t.peaks.is_empty() && t.valleys.is_empty());
        let ramp: Vec<usize> = (0..12).map(|i| 10 + 5 * i).collect();
        let t = area_trend(&frames(&ramp)).unwrap();
        assert!(t.peaks.is_empty() && t.valleys.is_empty());
        assert!(area_trend(&frames(&[1, 2])).is_err());
    }

    #[test]
    fn one_period_sine() {
        let n = 40;
        let areas: Vec<usize> = (0..n)
            .map(|i| (200.0 + 100.0 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin()).round() as usize)
            .collect();
        let t = area_trend(&frames(&areas)).unwrap();
        assert_eq!(t.peaks, vec![10]);
        assert_eq!(t.valleys, vec![30]);
    }
}
