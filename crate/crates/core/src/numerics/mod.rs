//! Dense tensors, reverse-mode gradients, finite-difference checking and the
//! checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use optim::{Adam, Sgd};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
