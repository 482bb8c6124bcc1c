//! Minimal reverse-mode differentiation for the encoders, losses and
//! optimizer. Everything is `f64`.

mod exact_sum;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use exact_sum::{exact_sum, ExactSum};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport, GRADCHECK_FLOOR, GRADCHECK_SCALE_FLOOR};
pub use params::{Param, ParamKind, ParamStore};
pub use tape::{Axis, Gradients, Reduction, Tape, Var, BATCH_NORM_EPS};
pub use tensor::Tensor;
