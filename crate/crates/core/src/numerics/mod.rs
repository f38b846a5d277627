//! Dense tensors and a small reverse-mode differentiation tape covering
//! exactly the ops an encoder, the adapters and the losses need.

pub mod gradcheck;
pub mod optim;
mod tape;
mod tensor;

pub use tape::{Gradients, Param, Tape, Var};
pub use tensor::{Scalar, Tensor};
