//! Dense tensors, the differentiable primitives the network is built from,
//! Adam, and finite-difference gradient checking.

mod adam;
mod gradcheck;
pub mod ops;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, ParamStore};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_store, relative_error, sample_coords, GradCheckReport,
    REL_ERROR_FLOOR,
};
pub use ops::{conv2d, conv2d_backward, linear, linear_backward, softmax, softmax_backward, squash, squash_backward};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub(crate) use tensor::{dot, euclidean};
