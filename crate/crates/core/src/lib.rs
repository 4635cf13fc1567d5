//! Compression toolkit for convolutional segmentation networks.
//!
//! Models are neutral compute graphs ([`graph`]) that can be executed
//! ([`exec`]), trained ([`train`]), weight- or filter-pruned ([`prune`]),
//! linted for atrous misconfiguration ([`lint`]) and scored ([`metrics`]).

pub mod cli;
pub mod error;
pub mod exec;
pub mod footprint;
pub mod graph;
pub mod init;
pub mod io;
pub mod lint;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod prune;
pub mod raster;
pub mod shape;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Conv2dAttrs, GraphBuilder, GraphDef, LayerKind, LayerNode, ModelGraph, Param, TensorShape};
pub use mask::{Mask, MaskSet};
pub use tensor::Tensor;
