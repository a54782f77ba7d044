//! Popularity-aware alignment and contrast (PAAC) on a LightGCN encoder.
//!
//! The crate is organised along the training pipeline:
//!
//! - [`dataset`]: ingestion, k-core filtering, the popularity-uniform test
//!   split, popularity statistics and BPR mini-batch sampling.
//! - [`encoder`]: embedding tables, normalized-graph propagation, noisy
//!   contrastive views and dot-product scoring.
//! - [`losses`]: every training objective together with its analytic gradient.
//! - [`trainer`]: Adam updates, the epoch loop, early stopping and checkpoints.
//! - [`eval`]: full-ranking top-K metrics, popularity-group gaps and embedding
//!   separation diagnostics.
//! - [`config`]: the flat `key = value` run configuration shared by the CLI.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
