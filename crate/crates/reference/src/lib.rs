//! Independent double-precision reference implementation of the model's
//! forward pass and loss, written from the math as plain loops.
//!
//! It never calls into the f32 op library, so it can serve as the oracle
//! side of gradient checks: central finite differences evaluated here are
//! accurate to ~1e-12, letting analytic f32 gradients be verified at the
//! 1e-3 relative tolerance without f32 cancellation noise.

pub mod fd;
pub mod model;
pub mod ops;

pub use fd::central_diff;
pub use model::{RefBatch, ReferenceModel};
