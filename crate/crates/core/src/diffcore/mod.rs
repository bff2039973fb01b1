//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! The primitive set is fixed: affine map, relu, tanh, exp, column-wise
//! log-softmax, elementwise power, elementwise product, full sum and linear
//! combination. That is enough to train MLP classifiers and to differentiate
//! the latent confidence objective through decoder, teacher and student.

mod tape;
mod tensor;

pub use tape::{check_gradient, check_gradient_wrt, Gradients, Tape, Var};
pub use tensor::Tensor;
