//! Genome-informed hyper-attention survival model.
//!
//! A `no_std` (alloc-only) crate holding everything that is pure computation:
//! a small tape-based reverse-mode autodiff over dense `f64` tensors, the
//! attention blocks, the cross-modal associating branch (CAB) that learns
//! histo-genomic associations by reconstructing functional gene groups from
//! patch bags, the hyper-attention survival branch (HSB) that predicts
//! discrete-time hazards from the bag alone, differential gene selection,
//! survival statistics, a synthetic cohort generator and the training loop.
//!
//! File formats, configuration loading and the command line live in the
//! `ghanet` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
#[macro_use]
extern crate std;

pub mod blocks;
pub mod cab;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod folds;
pub mod genes;
pub mod gradcheck;
pub mod graph;
pub mod hsb;
pub mod invariants;
pub mod math;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
