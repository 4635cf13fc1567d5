use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;

/// Binary keep-mask for one weight tensor (`true` = kept).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub dims: Vec<usize>,
    pub keep: Vec<bool>,
}

impl Mask {
    pub fn ones(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Mask {
            dims,
            keep: vec![true; n],
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

/// Masks for the prunable (conv and linear weight) tensors of a model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    masks: BTreeMap<String, Mask>,
}

impl MaskSet {
    pub fn new(masks: BTreeMap<String, Mask>) -> Self {
        MaskSet { masks }
    }

    /// All-ones masks over every prunable tensor.
    pub fn ones(graph: &ModelGraph) -> Self {
        let masks = graph
            .prunable_params()
            .into_iter()
            .map(|name| (name.to_string(), Mask::ones(graph.params()[name].dims.clone())))
            .collect();
        MaskSet { masks }
    }

    pub fn get(&self, name: &str) -> Option<&Mask> {
        self.masks.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mask)> {
        self.masks.iter()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn total(&self) -> usize {
        self.masks.values().map(Mask::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.masks.values().map(Mask::kept).sum()
    }

    /// Masks must cover exactly the model's prunable tensors with matching dims.
    pub fn validate_for(&self, graph: &ModelGraph) -> Result<()> {
        let prunable = graph.prunable_params();
        if prunable.len() != self.masks.len() {
            return Err(Error::InvalidArgument(format!(
                "mask set covers {} tensors, model has {} prunable tensors",
                self.masks.len(),
                prunable.len()
            )));
        }
        for name in prunable {
            let p = &graph.params()[name];
            match self.masks.get(name) {
                None => {
                    return Err(Error::InvalidArgument(format!("no mask for prunable tensor `{name}`")))
                }
                Some(m) if m.dims != p.dims || m.keep.len() != p.data.len() => {
                    return Err(Error::InvalidArgument(format!(
                        "mask for `{name}` has dims {:?}, tensor has {:?}",
                        m.dims, p.dims
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Entry-wise `self ⊇ other` on kept entries.
    pub fn contains(&self, other: &MaskSet) -> bool {
        self.masks.len() == other.masks.len()
            && self.masks.iter().all(|(name, m)| {
                other.masks.get(name).is_some_and(|o| {
                    o.keep.len() == m.keep.len() && m.keep.iter().zip(&o.keep).all(|(a, b)| *a || !*b)
                })
            })
    }

    /// `W' = W ⊙ M`; masked entries become bit-exact +0.0.
    pub fn apply(&self, graph: &ModelGraph) -> Result<ModelGraph> {
        self.validate_for(graph)?;
        let mut params = graph.params().clone();
        for (name, m) in &self.masks {
            let p = params.get_mut(name).expect("validated");
            zero_masked(&mut p.data, &m.keep);
        }
        graph.with_params(params)
    }
}

pub(crate) fn zero_masked(data: &mut [f32], keep: &[bool]) {
    for (w, k) in data.iter_mut().zip(keep) {
        if !*k {
            *w = 0.0;
        }
    }
}

pub(crate) fn masked_copy(data: &[f32], keep: &[bool]) -> Vec<f32> {
    data.iter()
        .zip(keep)
        .map(|(w, k)| if *k { *w } else { 0.0 })
        .collect()
}
