//! Dense tensors, a reverse-mode tape and a finite-difference oracle.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_many, finite_difference_check_params,
    finite_difference_check_piecewise, relative_error, Coords, PiecewiseCheck, SCALE_FLOOR,
};
pub use kernels::{gemm, log_sigmoid, matmul, reversed_cumsum, sigmoid, softmax, softplus, stable_log_sigmoid_pair};
pub(crate) use kernels::{axpy, dot, xlogx};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
