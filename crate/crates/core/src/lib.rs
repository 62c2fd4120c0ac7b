//! Shunted self-attention backbone built on a small reverse-mode tensor
//! engine: multi-scale token aggregation, detail-specific feed-forward
//! layers, convolutional patch embedding, analytic cost accounting and a
//! desk-scale training loop over a synthetic multi-scale shapes corpus.

pub mod blocks;
pub mod checks;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod ssa;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, Tensor, Var};
