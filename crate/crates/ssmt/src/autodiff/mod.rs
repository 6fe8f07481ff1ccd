//! Tensor algebra with reverse-mode automatic differentiation, the Adam
//! optimizer, the cosine learning-rate schedule, and finite-difference
//! gradient checking.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{compare, fd_grad, probe_indices, rel_err, GradReport, FD_ABS_FLOOR, FD_STEP};
pub use optim::{adam_step, cosine_lr, AdamHyper, AdamState};
pub use tape::{ResampleMode, Tape, Var};
pub use tensor::Tensor;
