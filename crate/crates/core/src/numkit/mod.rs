//! Dense matrices, reverse-mode gradients and finite-difference checking.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use ops::{argmax, l2_normalize_rows, smooth_nonlinearity, softmax_rows};
pub use tape::{Tape, Var};
pub use tensor::Tensor2;

/// Plain matrix product; see [`Tape::matmul`] for the tracked version.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> crate::Result<Tensor2> {
    a.matmul(b)
}
