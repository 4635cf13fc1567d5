//! Losses on logit maps, each returning the value and its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Bce,
    SoftDice,
    /// Mean of BCE and soft DICE.
    #[default]
    BceSoftDice,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "soft-dice" => Ok(LossKind::SoftDice),
            "bce-soft-dice" | "bce+soft-dice" => Ok(LossKind::BceSoftDice),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}`"))),
        }
    }
}

pub const DICE_SMOOTH: f64 = 1.0;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits.
pub fn bce_with_logits(logits: &[f32], target: &[f32]) -> (f64, Vec<f32>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            let (z, t) = (z as f64, t as f64);
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            ((sigmoid(z) - t) / n) as f32
        })
        .collect();
    (loss / n, grad)
}

/// `1 - mean_n (2 Σ p t + s) / (Σ p + Σ t + s)` with `p = sigmoid(z)`,
/// computed per sample of `per_sample` values.
pub fn soft_dice(logits: &[f32], target: &[f32], per_sample: usize) -> (f64, Vec<f32>) {
    let samples = logits.len() / per_sample;
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0;
    for s in 0..samples {
        let r = s * per_sample..(s + 1) * per_sample;
        let p: Vec<f64> = logits[r.clone()].iter().map(|z| sigmoid(*z as f64)).collect();
        let t = &target[r.clone()];
        let inter: f64 = p.iter().zip(t).map(|(p, t)| p * *t as f64).sum();
        let den: f64 = p.iter().sum::<f64>() + t.iter().map(|v| *v as f64).sum::<f64>() + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        total += num / den;
        for (i, (pi, ti)) in p.iter().zip(t).enumerate() {
            let dd_dp = (2.0 * *ti as f64 * den - num) / (den * den);
            grad[r.start + i] = (-dd_dp * pi * (1.0 - pi) / samples as f64) as f32;
        }
    }
    (1.0 - total / samples as f64, grad)
}

pub fn loss(kind: LossKind, logits: &[f32], target: &[f32], per_sample: usize) -> (f64, Vec<f32>) {
    match kind {
        LossKind::Bce => bce_with_logits(logits, target),
        LossKind::SoftDice => soft_dice(logits, target, per_sample),
        LossKind::BceSoftDice => {
            let (a, ga) = bce_with_logits(logits, target);
            let (b, gb) = soft_dice(logits, target, per_sample);
            let g = ga.iter().zip(&gb).map(|(x, y)| 0.5 * (x + y)).collect();
            (0.5 * (a + b), g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric(kind: LossKind, z: &[f32], t: &[f32], per: usize) -> Vec<f64> {
        (0..z.len())
            .map(|i| {
                let h = 1e-3;
                let mut zp = z.to_vec();
                zp[i] += h;
                let mut zm = z.to_vec();
                zm[i] -= h;
                (loss(kind, &zp, t, per).0 - loss(kind, &zm, t, per).0) / (2.0 * h as f64)
            })
            .collect()
    }

    #[test]
    fn bce_at_zero_logits() {
        let (l, g) = bce_with_logits(&[0.0; 4], &[1.0, 0.0, 1.0, 1.0]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g, vec![-0.125, 0.125, -0.125, -0.125]);
    }

    #[test]
    fn gradients_match_differences() {
        let z = [0.3f32, -1.2, 2.0, 0.1, -0.4, 0.9];
        let t = [1.0f32, 0.0, 1.0, 0.0, 0.0, 1.0];
        for kind in [LossKind::Bce, LossKind::SoftDice, LossKind::BceSoftDice] {
            let (_, g) = loss(kind, &z, &t, 3);
            for (a, n) in g.iter().zip(numeric(kind, &z, &t, 3)) {
                assert!((*a as f64 - n).abs() < 1e-4, "{kind:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn perfect_dice_is_zero_loss() {
        let (l, _) = soft_dice(&[50.0, -50.0], &[1.0, 0.0], 2);
        assert!(l.abs() < 1e-12);
    }
}
