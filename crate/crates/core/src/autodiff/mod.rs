//! Dense `f64` tensors with reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    check_param_gradients, finite_difference_check, relative_error, ParamCheckReport,
};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{softmax_in_place, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
