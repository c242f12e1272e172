//! Dense tensors, a replayable compute graph with reverse-mode
//! differentiation, a finite-difference gradient checker and Adam.

mod adam;
mod check;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, decay_lr, AdamState, DECAY_PERIOD_EPOCHS};
pub use check::{default_epsilon, gradient_check, gradient_check_all, DEFAULT_EPSILON};
pub(crate) use graph::sigmoid;
pub use graph::{Graph, Var};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
