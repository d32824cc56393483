//! Small reverse-mode autodiff engine for convolutional codecs.
//!
//! Enough machinery to train and verify learned image compression models on
//! a CPU: NCHW tensors, strided and transposed convolutions, GDN, residual
//! and attention blocks, entropy-model likelihood ops, Adam, and a
//! finite-difference gradient checker.

pub mod autograd;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod special;
pub mod tensor;

pub use autograd::{no_grad, Gradients, Var};
pub use params::{Init, ParamId, ParamStore, Params};
pub use tensor::{Float, Tensor};
