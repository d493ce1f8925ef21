//! Minimal reverse-mode automatic differentiation over dense arrays.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{ParamCheckpoint, ParamRecord, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{grad_check, grad_check_params, relative_error, ParamCheck, GRAD_FLOOR};
pub use params::{ParamId, ParamSet};
pub use tape::{CustomOp, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
