//! Small reverse-mode automatic differentiation engine over dense `f64`
//! tensors. Just enough to train message-passing encoders, a vector
//! quantizer and their reconstruction losses on desk-sized graphs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

mod error;
mod optim;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use optim::{ema_update, Moments, OptimizerState, ParamBinder, Parameters};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Norms at or below this are treated as zero by normalizing operations.
pub const NORM_EPS: f64 = 1e-12;
