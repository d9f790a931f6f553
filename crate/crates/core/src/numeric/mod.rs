//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_report, GradCheckReport};
pub use params::{xavier_uniform, Params};
pub use tape::{
    log_sigmoid, log_sum_exp, sigmoid, softmax_in_place, Binary, GradientMap, Tape, Unary, Var,
    SINGULARITY_EPS,
};
pub use tensor::Tensor;
