//! Differentiable window attention.
//!
//! Soft, trainable attention windows built from left/right boundary
//! distributions, the multiplicative and additive window attention variants
//! that consume them, and a small Transformer with a training harness for
//! desk-scale tasks.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod windowmask;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
