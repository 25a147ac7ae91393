//! Differentiable ops over [`Tensor`](crate::numerics::Tensor).
//!
//! Each op validates shapes, computes its output, rejects non-finite
//! results, and (when a tape is active and an input requires grad)
//! records a closure mapping the output gradient to input gradients.

mod elementwise;
mod linalg;
mod metric;
mod normalize;
mod reduce;
mod shape;

pub use normalize::BatchStats;
pub use shape::concat;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub(crate) fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// Splits a shape at the last axis: (rows, row_width).
pub(crate) fn rows_of(shape: &[usize]) -> (usize, usize) {
    let w = *shape.last().expect("rows_of on 0-d shape");
    (shape.iter().product::<usize>() / w, w)
}

/// Scalar used by cross-entropy / log-sum-exp style reductions.
pub(crate) fn logsumexp_row(row: &[f32]) -> f32 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f32 = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Cross-entropy over logits `[B, K]` with integer labels; returns a scalar
/// tensor holding the batch mean of −log softmax(true class). No smoothing.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    metric::cross_entropy(logits, labels)
}
