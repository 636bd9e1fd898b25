//! Minimal reverse-mode automatic differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, ParamCheck, REL_FLOOR};
pub use params::{Param, ParamGrads, ParamId, ParamSet};
pub use tape::{log_sum_exp, Gradients, OpKind, Tape, Var, COSINE_NORM_EPS};
pub use tensor::{Real, Tensor};
