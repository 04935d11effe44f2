//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! with the handful of operators needed by convolutional image-to-image
//! networks: strided and transposed convolution, reflection padding,
//! instance normalization, pooling, pointwise activations and reductions.
//!
//! Everything runs on one thread in a fixed order, so results are
//! bit-reproducible for identical inputs.

mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use optim::{Adagrad, Adam};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
