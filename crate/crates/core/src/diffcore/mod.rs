//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! The op set is closed: convolutions with optional kernel masks, `relu`,
//! `add`, `concat_channels`, `scale`, `sqrt`, index `gather`, the two
//! pixel-averaged distances `mean_abs` / `mean_sq`, and `stop_gradient`.
//! Everything the network and its objectives compute is expressed in these.

mod conv;
mod gemm;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use conv::{conv2d, conv2d_backward, ConvGrads};
pub use gradcheck::{finite_diff_grad, relative_error, relative_error_all};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
