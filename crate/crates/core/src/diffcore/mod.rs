//! Minimal dense-tensor autodiff core: the exact operation set the network
//! and loss require, reverse-mode gradients, and the optimizer.

mod kernels;
mod optim;
mod tape;
mod tensor;

pub use kernels::{bce_with_logit, sigmoid};
pub use optim::{clip_global_norm, Optimizer, OptimizerConfig, Parameter, StepStats};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("tensor shape {shape:?} does not match {numel} elements")]
    BadShape { shape: Vec<usize>, numel: usize },
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("bilinear coordinate {index} = ({x}, {y}) outside [-1, 1]^2")]
    CoordOutOfRange { index: usize, x: f64, y: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("training diverged: non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("parameter `{param}` has no gradient; run backward first")]
    MissingGradient { param: String },
}
