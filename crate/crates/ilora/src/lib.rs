//! Latent interaction-graph inference with graph-conditioned low-rank
//! adaptation.
//!
//! The crate infers a sparse interaction graph over the entities of each
//! input sample, conditions a low-rank weight update on that graph, and
//! marginalizes predictions over graph samples. A separate statistical
//! pipeline builds cohort-level reference edge sets against which inferred
//! graphs are scored.
//!
//! Module map:
//! - [`autodiff`]: reverse-mode tape over dense `f64` tensors.
//! - [`distributions`]: closed-form divergences, rate matching, samplers.
//! - [`graph`]: node encoding, edge posteriors, adjacency sampling.
//! - [`model`]: graph neural branch, hypernetwork, adapted backbone.
//! - [`train`]: loss assembly, optimizer, training loop, gradient checks.
//! - [`eval`]: calibration, ranking, and graph-recovery metrics.
//! - [`stats`]: compositional reference pipeline (correlation + ratio screens).
//! - [`data`]: synthetic generator, abundance IO, graph export.
//! - [`cli`]: command-line entry points.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
