//! Graph-interactive transformer for re-identification, built from first
//! principles: a minimal f32 tensor/autodiff substrate, patch embedding,
//! per-patch correlation graphs coupled two-way with transformer layers,
//! BNNeck losses, retrieval evaluation, and a desk-scale training loop.

pub mod error;
pub mod numerics;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod eval;
pub mod lcg;
pub mod losses;
pub mod model;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use numerics::{GradTape, Gradients, Tensor};
