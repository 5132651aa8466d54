//! Dense buffers, differentiable kernels, the reverse-mode tape, gradient
//! checking and optimization.

mod buffer;
pub mod conv;
mod gemm;
mod gradcheck;
pub mod ops;
mod optim;
mod tape;

pub use buffer::NdBuffer;
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use optim::{adam_step, AdamConfig, Bound, OptimizerState, ParamId, ParamStore};
pub use tape::{FnKernel, Gradients, Kernel, Tape, Var};
