//! Dense f32 tensor arithmetic with reverse-mode gradients.
//!
//! Everything downstream (embedding, graph module, transformer, losses)
//! builds on this contract only: row-major `Tensor`s, ops that validate
//! shapes and reject non-finite outputs, and a `GradTape` that replays
//! recorded ops in reverse to accumulate gradients per tensor identity.

pub mod ops;
mod tape;
mod tensor;


pub use tape::{GradTape, Gradients};
pub use tensor::{Tensor, TensorId};

pub(crate) use tape::{record, tape_active, OpRecord};
pub(crate) use tensor::check_finite;
