//! File formats, configuration, threaded evaluation and the command-line
//! driver for [`revmux_core`].

pub mod atomic;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod parallel;

pub use error::{Error, Result};
pub use revmux_core;
