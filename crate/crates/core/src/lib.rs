//! A desk-scale laboratory for source-modality monitoring.
//!
//! The crate builds a synthetic two-modality token world, trains a small
//! transformer to retrieve content from the queried source, and measures
//! how that ability depends on marker tokens: selectivity under marker
//! perturbations, embedding-level separability probes, freeze-remove
//! activation patching and learned steering vectors.

pub mod error;
pub mod eval;
pub mod interventions;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod probes;
pub mod seed;
pub mod trainer;
pub mod world;

pub use error::{LabError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
