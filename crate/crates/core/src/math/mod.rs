//! Tensors, reverse-mode autodiff, network primitives and the optimizer.

pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use nn::{Activation, Bottleneck, Conv, Mlp, Module};
pub use optim::{AdamConfig, AdamState};
pub use params::{Field, ParamFile};
pub use real::{DType, Real};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
