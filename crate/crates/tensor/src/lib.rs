//! Dense `f64` tensors with tape-based reverse-mode differentiation, the
//! layer primitives of the highlight model, finite-difference checking and
//! an Adam optimizer.

mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{central_difference, grad_check, grad_check_many, max_relative_error, relative_error};
pub use optim::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use tape::{BackwardFault, Gradients, NormMode, OpKind, RunningStats, Tape, Var};
pub use tensor::Tensor;
