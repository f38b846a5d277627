//! Reversible data multiplexing for frozen transformer encoders.
//!
//! N classification inputs are prefilled through the first `l` encoder
//! layers, down-projected, mixed by an additive coupling chain into one
//! composite sequence, pushed through the remaining layers once, then
//! unmixed by the exact inverse of the chain and classified per input.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command-line
//! driver and threaded evaluation live in the `revmux` crate.
#![no_std]
// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adapters;
pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod objectives;
pub mod pipeline;

pub use error::{Error, Result};
