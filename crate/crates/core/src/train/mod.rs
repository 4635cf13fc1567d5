//! Gradient-based training and fine-tuning with frozen pruning masks.

pub mod backward;
pub mod loss;
pub mod schedule;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::mask::{zero_masked, MaskSet};
use crate::metrics::eval::mean_dice;
use crate::metrics::Dataset;

pub use backward::{backward, forward_train, loss_and_gradients, train_loss, Gradients};
pub use loss::LossKind;
pub use schedule::{peak_lr_for_run, LrSchedule};

/// Momentum of the running batch-norm estimates.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub momentum: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 8, momentum: 0.9, loss: LossKind::default(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Optimiser steps per epoch (the last batch may be short).
pub fn steps_per_epoch(samples: usize, batch_size: usize) -> u64 {
    samples.div_ceil(batch_size) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub mean_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{:e},{}\n", s.step, s.epoch, s.lr, s.loss));
        }
        out
    }

    /// Writes `history.csv` (per step) and `history.json` (everything) to `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("history.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("history.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))
    }

    pub fn last_val_dice(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.val_dice)
    }
}

/// SGD with momentum over a model, epoch by epoch.
pub struct Trainer {
    graph: ModelGraph,
    masks: Option<MaskSet>,
    velocity: BTreeMap<String, Vec<f32>>,
    config: TrainConfig,
    schedule: LrSchedule,
    step: u64,
    epoch: u64,
    history: TrainHistory,
}

impl Trainer {
    /// Masked weights are zeroed on entry.
    pub fn new(graph: ModelGraph, config: TrainConfig, schedule: LrSchedule, masks: Option<MaskSet>) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let mut t = Trainer {
            velocity: BTreeMap::new(),
            graph,
            masks: None,
            config,
            schedule,
            step: 0,
            epoch: 0,
            history: TrainHistory::default(),
        };
        t.set_masks(masks)?;
        Ok(t)
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn masks(&self) -> Option<&MaskSet> {
        self.masks.as_ref()
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn into_parts(self) -> (ModelGraph, Option<MaskSet>, TrainHistory) {
        (self.graph, self.masks, self.history)
    }

    /// Installs (or clears) masks; masked weights and their momentum become zero.
    pub fn set_masks(&mut self, masks: Option<MaskSet>) -> Result<()> {
        if let Some(m) = &masks {
            self.graph = m.apply(&self.graph)?;
            for (name, mask) in m.iter() {
                if let Some(v) = self.velocity.get_mut(name) {
                    zero_masked(v, &mask.keep);
                }
            }
        }
        self.masks = masks;
        Ok(())
    }

    /// Swaps in a structurally different model (after filter pruning);
    /// optimiser state restarts.
    pub fn replace_graph(&mut self, graph: ModelGraph) {
        self.graph = graph;
        self.masks = None;
        self.velocity.clear();
    }

    /// One pass over `data` in a seeded shuffled order, then validation.
    pub fn run_epoch(&mut self, data: &Dataset, val: Option<&Dataset>) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training dataset is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for batch in order.chunks(self.config.batch_size) {
            let (x, y) = data.batch(batch)?;
            let lr = self.schedule.lr_at(self.step, self.epoch)?;
            let (loss, grads, stats) = match loss_and_gradients(&self.graph, &x, &y, self.config.loss, self.masks.as_ref()) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(self.diverged()),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
                return Err(self.diverged());
            }
            self.apply_update(&grads, lr, stats)?;
            self.history.steps.push(StepRecord { step: self.step, epoch: self.epoch, lr, loss });
            losses.push(loss);
            self.step += 1;
        }
        let val_dice = match val {
            Some(v) if !v.is_empty() => Some(mean_dice(&self.graph, self.masks.as_ref(), v)?),
            _ => None,
        };
        let rec = EpochRecord {
            epoch: self.epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_dice,
        };
        self.history.epochs.push(rec.clone());
        self.epoch += 1;
        Ok(rec)
    }

    fn diverged(&self) -> Error {
        Error::Divergence { epoch: self.epoch as usize, step: self.step as usize }
    }

    fn apply_update(
        &mut self,
        grads: &Gradients,
        lr: f64,
        stats: BTreeMap<String, backward::BnBatchStats>,
    ) -> Result<()> {
        let (arch, mut params, mut buffers) = self.graph.clone().into_parts();
        let mu = self.config.momentum as f32;
        let lr = lr as f32;
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((w, vi), gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi;
                *w -= lr * *vi;
            }
            if let Some(mask) = self.masks.as_ref().and_then(|m| m.get(name)) {
                zero_masked(&mut p.data, &mask.keep);
                zero_masked(v, &mask.keep);
            }
        }
        for (bn, st) in stats {
            let upd = |buf: &mut Vec<f32>, new: &[f32]| {
                for (r, s) in buf.iter_mut().zip(new) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                }
            };
            upd(&mut buffers.get_mut(&format!("{bn}.running_mean")).unwrap().data, &st.mean);
            upd(&mut buffers.get_mut(&format!("{bn}.running_var")).unwrap().data, &st.var);
            buffers.get_mut(&format!("{bn}.num_batches_tracked")).unwrap().data[0] += 1.0;
        }
        self.graph = ModelGraph::new(arch, params, buffers)?;
        Ok(())
    }
}

/// Output of a completed training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub graph: ModelGraph,
    pub masks: Option<MaskSet>,
    pub history: TrainHistory,
}

/// Trains for `config.epochs` epochs.
pub fn train(
    graph: ModelGraph,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    schedule: LrSchedule,
    masks: Option<MaskSet>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(graph, config.clone(), schedule, masks)?;
    for _ in 0..config.epochs {
        t.run_epoch(data, val)?;
    }
    let (graph, masks, history) = t.into_parts();
    Ok(TrainOutcome { graph, masks, history })
}

/// One-cycle schedule spanning a whole run.
pub fn one_cycle_for(config: &TrainConfig, samples: usize, peak_lr: f64) -> LrSchedule {
    LrSchedule::OneCycle {
        peak_lr,
        warmup_fraction: 0.3,
        total_steps: config.epochs as u64 * steps_per_epoch(samples, config.batch_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Conv2dAttrs, GraphBuilder};
    use crate::init::init_model;
    use crate::metrics::{generate, SynthKind, SynthSpec};

    fn small_net() -> ModelGraph {
        let mut b = GraphBuilder::new();
        let x = b.input("input", 1);
        let c = b.conv_bn_relu("c1", &x, Conv2dAttrs::new(1, 4, 3).padding(1));
        let o = b.conv("out", &c, Conv2dAttrs::new(4, 1, 1).bias(true));
        init_model(b.finish(&o).unwrap(), 0)
    }

    #[test]
    fn zero_lr_keeps_params() {
        let data = generate(&SynthSpec::new(SynthKind::Blob, 1, 32, 0)).unwrap();
        let g = small_net();
        let cfg = TrainConfig { epochs: 1, batch_size: 1, ..Default::default() };
        let out = train(g.clone(), &data, None, &cfg, LrSchedule::Constant { lr: 0.0 }, None).unwrap();
        assert_eq!(out.graph.params(), g.params());
        assert_eq!(out.history.steps.len(), 1);
    }

    #[test]
    fn zero_output_layer_bias_gradient() {
        let data = generate(&SynthSpec::new(SynthKind::Blob, 2, 32, 3)).unwrap();
        let g = small_net();
        let mut params = g.params().clone();
        params.get_mut("out.weight").unwrap().data.fill(0.0);
        params.get_mut("out.bias").unwrap().data.fill(0.0);
        let g = g.with_params(params).unwrap();
        let (x, y) = data.batch(&[0, 1]).unwrap();
        let (_, grads, _) = loss_and_gradients(&g, &x, &y, LossKind::Bce, None).unwrap();
        let expect = y.iter().map(|t| 0.5 - *t as f64).sum::<f64>() / y.len() as f64;
        assert!((grads["out.bias"][0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn epochs_zero_rejected() {
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(Trainer::new(small_net(), cfg, LrSchedule::Constant { lr: 0.1 }, None).is_err());
    }

    #[test]
    fn masked_entries_stay_zero() {
        let data = generate(&SynthSpec::new(SynthKind::Blob, 4, 32, 1)).unwrap();
        let g = small_net();
        let masks = crate::prune::prune_global(&g, 0.5).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, ..Default::default() };
        let out = train(g, &data, None, &cfg, LrSchedule::Constant { lr: 0.05 }, Some(masks.clone())).unwrap();
        for (name, m) in masks.iter() {
            for (w, k) in out.graph.params()[name].data.iter().zip(&m.keep) {
                if !*k {
                    assert_eq!(w.to_bits(), 0);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_history() {
        let data = generate(&SynthSpec::new(SynthKind::Blob, 5, 32, 2)).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, ..Default::default() };
        let run = || train(small_net(), &data, None, &cfg, LrSchedule::Constant { lr: 0.01 }, None).unwrap().history;
        assert_eq!(run(), run());
    }
}
