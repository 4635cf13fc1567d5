//! Magnitude-based compression: unstructured weight masks and structured
//! filter removal.

pub mod filter;
pub mod weight;

pub use weight::{prune_global, prune_local, prune_weights, Scope, SparsityReport};
