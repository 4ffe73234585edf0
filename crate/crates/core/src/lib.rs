//! Multi-view graph engine for bundle recommendation.
//!
//! The pipeline: three bipartite relations (user-bundle, user-item,
//! bundle-item) are propagated separately with symmetric-normalized message
//! passing, pooled across layers, fused into single user and bundle
//! representations, and trained jointly with a pairwise ranking loss and a
//! two-pass contrastive loss on the fused representations. Evaluation ranks
//! every bundle per user.
//!
//! All numeric code is generic over [`num::Real`] so training can run in
//! `f32` while gradient verification runs in `f64`; see the crate-root
//! aliases for the common concrete instantiations.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod num;
pub mod rng;
pub mod synthetic;
pub mod train;
pub mod views;

pub use error::{Error, Result};
pub use num::Real;

/// Single-precision embedding table, the training default.
pub type EmbeddingTable32 = views::EmbeddingTable<f32>;
/// Double-precision embedding table for verification work.
pub type EmbeddingTable64 = views::EmbeddingTable<f64>;
/// Single-precision forward-pass graphs.
pub type BundleGraphs32 = views::BundleGraphs<f32>;
/// Double-precision forward-pass graphs.
pub type BundleGraphs64 = views::BundleGraphs<f64>;
