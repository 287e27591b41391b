//! Dense `f64` tensors with a tape-based reverse-mode differentiator.
//!
//! Ops are recorded on a [`Tape`] as they execute; [`Tape::backward`] replays
//! them in reverse. Only one-element tensors broadcast in binary ops.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::{
    softmax_rows, BatchNormConfig, Elementwise, Mode, PoolKind, Reduction, Tape, Var,
};
pub use tensor::Tensor;
