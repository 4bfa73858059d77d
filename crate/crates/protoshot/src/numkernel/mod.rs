//! Minimal dense numerical core with reverse-mode differentiation.
//!
//! Everything the few-shot model needs and nothing more: a dense 2-d tensor,
//! a Wengert tape over a fixed op set, named parameters with Adam state, and
//! a step learning-rate schedule.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{step_lr, Param, ParamStore};
pub use tape::{MhaParamIds, Tape, ValueId};
pub use tensor::Tensor2;
