//! Learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Start LR of the one-cycle ramp is `peak / ONE_CYCLE_DIV_START`.
pub const ONE_CYCLE_DIV_START: f64 = 25.0;
/// Final LR is the start LR divided by this.
pub const ONE_CYCLE_DIV_FINAL: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warm-up from `peak/25` to `peak` over `round(warmup_fraction *
    /// total_steps)` steps, then cosine decay to `peak/25/1e4` at `total_steps`.
    OneCycle { peak_lr: f64, warmup_fraction: f64, total_steps: u64 },
    /// `initial_lr * gamma^epoch`.
    Exponential { initial_lr: f64, gamma: f64 },
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match *self {
            LrSchedule::OneCycle { peak_lr, warmup_fraction, total_steps } => {
                if !(peak_lr > 0.0) {
                    return bad(format!("peak LR must be positive, got {peak_lr}"));
                }
                if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
                    return bad(format!("warm-up fraction must lie in (0, 1), got {warmup_fraction}"));
                }
                if total_steps == 0 {
                    return bad("one-cycle schedule needs at least one step".into());
                }
            }
            LrSchedule::Exponential { initial_lr, gamma } => {
                if !(initial_lr >= 0.0) || !(gamma > 0.0 && gamma <= 1.0) {
                    return bad(format!("exponential schedule needs lr >= 0 and 0 < gamma <= 1, got {initial_lr}, {gamma}"));
                }
            }
            LrSchedule::Constant { lr } => {
                if !(lr >= 0.0) {
                    return bad(format!("learning rate must be non-negative, got {lr}"));
                }
            }
        }
        Ok(())
    }

    /// LR for global optimiser `step` (0-based) within `epoch` (0-based).
    pub fn lr_at(&self, step: u64, epoch: u64) -> Result<f64> {
        Ok(match *self {
            LrSchedule::OneCycle { peak_lr, warmup_fraction, total_steps } => {
                if step > total_steps {
                    return Err(Error::InvalidArgument(format!(
                        "step {step} is past the schedule's {total_steps} steps"
                    )));
                }
                let start = peak_lr / ONE_CYCLE_DIV_START;
                let end = start / ONE_CYCLE_DIV_FINAL;
                let warm = ((warmup_fraction * total_steps as f64).round() as u64).max(1);
                if step <= warm {
                    start + (peak_lr - start) * step as f64 / warm as f64
                } else {
                    let t = (step - warm) as f64 / (total_steps - warm).max(1) as f64;
                    end + (peak_lr - end) * (1.0 + (PI * t).cos()) / 2.0
                }
            }
            LrSchedule::Exponential { initial_lr, gamma } => initial_lr * gamma.powi(epoch as i32),
            LrSchedule::Constant { lr } => lr,
        })
    }
}

/// Peak LR for fine-tuning run `run` (1-based): lowered by `decrement` per run.
pub fn peak_lr_for_run(base: f64, decrement: f64, run: u32) -> Result<f64> {
    if run == 0 {
        return Err(Error::InvalidArgument("run index starts at 1".into()));
    }
    let lr = base - decrement * (run - 1) as f64;
    if lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("run {run} would need a non-positive peak LR")));
    }
    Ok(lr)
}
