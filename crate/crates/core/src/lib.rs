//! Ensemble node classification on heterogeneous graphs.
//!
//! Relation-group message passing runs over mini-batch subgraph views drawn at
//! several batch sizes. Per-view embeddings are fused by a two-stage min-max
//! residual attention, and training minimizes cross-entropy plus an ℓ₁
//! diversity penalty on the Gram matrix of pooled view embeddings. Every
//! gradient is derived by hand and checked against finite differences.

pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradients;
pub mod hetgraph;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod scaling;
pub mod sampling;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
