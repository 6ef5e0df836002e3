//! Deterministic tensor engine with reverse-mode differentiation.
//!
//! Layout is `N, C, H, W` throughout; video clips fold time into `N`.

mod conv;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;
pub mod tsr1;

pub use conv::{conv2d, conv_transpose2d};
pub use gradcheck::grad_check;
pub use scalar::{DType, Scalar};
pub use tape::{Binary, LinearMap, Reduce, Tape, Unary, Var};
pub use tensor::Tensor;

/// Plain-tensor reduction with the same fixed summation order as the tape op.
pub fn reduce<S: Scalar>(kind: Reduce, x: &Tensor<S>, axes: &[usize]) -> crate::Result<Tensor<S>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let r = tape.reduce(kind, v, axes)?;
    Ok(tape.value(r).clone())
}
