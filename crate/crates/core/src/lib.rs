//! Keystroke-dynamics user identification and authentication.
//!
//! The core is generic over the floating-point type; the aliases below pin
//! it to `f64` (the default everywhere) or `f32`.

pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod federated;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type ParameterSet = tensor::ParameterSet<f64>;
pub type Tape = autograd::Tape<f64>;
pub type Model = model::TempCharModel<f64>;
pub type LstmClassifier = baselines::lstm::LstmClassifier<f64>;

pub type TensorF32 = tensor::Tensor<f32>;
pub type ParameterSetF32 = tensor::ParameterSet<f32>;
pub type TapeF32 = autograd::Tape<f32>;
pub type ModelF32 = model::TempCharModel<f32>;
