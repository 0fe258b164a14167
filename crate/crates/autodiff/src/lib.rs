//! Reverse-mode automatic differentiation over dense `f64` arrays, with the
//! 1D convolutional, recurrent and normalisation layers, losses, Adam and a
//! reduce-on-plateau scheduler.

pub mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod nn;
mod ops;
pub mod optim;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Var};
pub use ops::{softmax_rows, BatchStats, NormMode, Padding};
pub use tensor::Tensor;
