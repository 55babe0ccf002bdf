//! Cold-start item embedding initialization with collaborative meta
//! embeddings.
//!
//! The crate bundles everything needed to study the approach end to end on
//! desk-scale data:
//!
//! - [`diffgraph`] — a small reverse-mode autodiff core with Adam;
//! - [`recmodel`] — the embed-concat-MLP click prediction backbone;
//! - [`beg`] — the base embedding generator (co-occurrence similarity over
//!   old items, top-K neighbor weights, weighted-sum embedding);
//! - [`seg`] — the shift embedding generator (user/attribute refinement and
//!   a two-minibatch meta-training loop with a differentiable inner step);
//! - [`cometa`] — composition of the two generators, cold-phase fallbacks,
//!   warm-phase regeneration, ablation variants and baseline initializers;
//! - [`dataio`] — MovieLens / generic CSV ingestion, the old/new item split
//!   with warm folds, and a synthetic generator with planted structure;
//! - [`evalharness`] — AUC/Logloss and the staged cold/warm evaluation
//!   protocol;
//! - [`checkpoint`] — bit-exact model/generator serialization;
//! - [`config`] and [`cli`] — the config document and the command-line
//!   pipeline built on all of the above.

pub mod beg;
pub mod checkpoint;
pub mod cli;
pub mod cometa;
pub mod config;
pub mod dataio;
pub mod diffgraph;
pub mod evalharness;
pub mod recmodel;
pub mod seg;

pub use diffgraph::Tensor;
