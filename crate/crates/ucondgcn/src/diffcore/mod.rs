//! Minimal dense-tensor arithmetic with reverse-mode gradients.
//!
//! A [`Tape`] records every primitive applied to [`Tensor`] values held in an
//! arena; [`Tape::backward`] replays the records in reverse and accumulates
//! gradients into every `requires_grad` leaf. Kernels are plain loops over
//! contiguous `f64` buffers with a fixed reduction order, so repeated runs of
//! the same tape are bitwise identical.
//!
//! [`finite_diff_check`] is the verification oracle: it compares the analytic
//! gradient of a scalar-valued tensor function against central differences.

mod check;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
