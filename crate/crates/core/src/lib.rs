//! Painterly image harmonization: a dual-encoder generator with masked AdaIN
//! and residual feature injection, pixel-wise discriminators, and the
//! training, data, persistence and evaluation machinery around them.

pub mod autodiff;
pub mod bt;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autodiff::{Grads, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor, TensorError};
