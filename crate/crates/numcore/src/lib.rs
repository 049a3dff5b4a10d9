//! Float64 tensors with tape-based reverse-mode autodiff, covering the
//! convolution, normalization and activation ops of a small attention CNN.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{NumError, Result};
pub use graph::{Activation, BnMode, BnOptions, Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{BufferId, ParamId, ParamStore, Parameter, RunningStats};
pub use tensor::Tensor;
