//! Dense `f64` tensors, a reverse-mode tape, and SGD with momentum.

pub mod gradcheck;
mod kernel;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use kernel::gaussian_kernel2d;
pub use optim::{sgd_step, Binding, OptimizerConfig, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
