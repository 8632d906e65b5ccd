//! Deterministic differentiable-computation core: dense `f64` tensors,
//! tape-based reverse-mode gradients for a fixed op set, Adam, and a
//! warmup + multi-step learning-rate schedule.

pub mod error;
pub mod gradcheck;
pub mod init;
mod linalg;
pub mod optim;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{NumError, Result};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use schedule::LrSchedule;
pub use tape::{Gradients, Tape, Var, MASK_DROP};
pub use tensor::Tensor;
