//! Minimal CPU neural-network toolkit: dense tensors, layers with explicit
//! backward passes, SGD/Adam, and a binary checkpoint container. All numeric
//! code is generic over [`Scalar`] (`f32` or `f64`).

pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use layers::{BatchNorm, Conv2d, Layer, Linear, Mode, Param, Residual};
pub use network::{Network, StateDict, Tape};
pub use optim::{cosine_lr, Adam, Sgd};
pub use scalar::Scalar;
pub use tensor::Tensor;
