//! Prune-then-fine-tune runs.
//!
//! Fine-tuning starts from the dense model: the first epoch trains it
//! unchanged, pruning happens at the end of that epoch, and the remaining
//! epochs train the pruned model (masks frozen, or the rewritten lean graph).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::mask::MaskSet;
use crate::metrics::Dataset;
use crate::prune::filter::{prune_filters, FilterPruneReport, MergeRule};
use crate::prune::weight::{prune_weights, sparsity_report, Scope, SparsityReport};
use crate::train::{LrSchedule, TrainConfig, TrainHistory, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PruneMethod {
    Weights { scope: Scope, sparsity: f64 },
    Filters { fraction: f64, norm: f64, merge: MergeRule },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PruneReport {
    Weights(SparsityReport),
    Filters(FilterPruneReport),
}

#[derive(Clone, Debug)]
pub struct Pruned {
    pub graph: ModelGraph,
    pub masks: Option<MaskSet>,
    pub report: PruneReport,
}

/// Applies one pruning method. Weight pruning keeps the architecture and
/// returns masks (already applied to the weights); filter pruning returns
/// the rewritten dense graph.
pub fn prune(graph: &ModelGraph, method: PruneMethod) -> Result<Pruned> {
    match method {
        PruneMethod::Weights { scope, sparsity } => {
            let masks = prune_weights(graph, scope, sparsity)?;
            let report = sparsity_report(graph, &masks, Some(sparsity))?;
            Ok(Pruned { graph: masks.apply(graph)?, masks: Some(masks), report: PruneReport::Weights(report) })
        }
        PruneMethod::Filters { fraction, norm, merge } => {
            let (g, report) = prune_filters(graph, fraction, norm, merge)?;
            Ok(Pruned { graph: g, masks: None, report: PruneReport::Filters(report) })
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub graph: ModelGraph,
    pub masks: Option<MaskSet>,
    pub history: TrainHistory,
    pub report: PruneReport,
}

/// Trains one epoch dense, prunes, then trains `config.epochs - 1` more.
/// On failure the trainer (with its partial history) is handed back.
pub fn prune_and_finetune(
    graph: ModelGraph,
    method: PruneMethod,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    schedule: LrSchedule,
) -> std::result::Result<FinetuneOutcome, (Error, Option<TrainHistory>)> {
    let mut trainer = Trainer::new(graph, config.clone(), schedule, None).map_err(|e| (e, None))?;
    let fail = |t: &Trainer, e: Error| (e, Some(t.history().clone()));
    trainer.run_epoch(data, None).map_err(|e| fail(&trainer, e))?;
    let pruned = prune(trainer.graph(), method).map_err(|e| fail(&trainer, e))?;
    match &pruned.masks {
        Some(m) => {
            trainer.set_masks(Some(m.clone())).map_err(|e| fail(&trainer, e))?;
        }
        None => trainer.replace_graph(pruned.graph.clone()),
    }
    for _ in 1..config.epochs {
        trainer.run_epoch(data, val).map_err(|e| fail(&trainer, e))?;
    }
    let (graph, masks, history) = trainer.into_parts();
    Ok(FinetuneOutcome { graph, masks, history, report: pruned.report })
}
