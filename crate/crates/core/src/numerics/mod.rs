//! Dense tensors, reverse-mode autodiff, and finite-difference checking.

mod element;
pub(crate) mod simd;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use element::Element;
pub use gradcheck::grad_check;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
