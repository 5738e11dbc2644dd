//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The library is deliberately small: it covers the layers needed by the
//! sequential transformer models (dense, convolution, pooling, LSTM,
//! softmax policies) plus Adam and a flat checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use nn::{Conv2d, Linear, LstmCell, Module};
pub use scalar::Scalar;
pub use tape::{cross_entropy_rows, softmax_rows, Activation, CustomOp, Gradients, Tape, Var};
pub use tensor::{ParamId, Tensor};
