//! File formats, pipeline and command line around `ghanet-core`.
//!
//! Formats: `GHB1` patch bags, the clinical CSV, the genomics matrix and its
//! category sidecar, the cohort manifest, `GHCK` checkpoints and the TSV/JSON
//! exports. [`pipeline`] holds one function per subcommand.

mod bytes;

pub mod bag;
pub mod checkpoint;
pub mod clinical;
pub mod cli;
pub mod config;
pub mod error;
pub mod export;
pub mod genomics;
pub mod manifest;
pub mod pipeline;

pub use error::{Error, FormatError, Result};
