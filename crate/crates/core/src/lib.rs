//! Compression toolchain and behavioral simulator for a multi-macro SRAM
//! compute-in-memory CNN accelerator.

pub mod cim_macro;
pub mod error;
pub mod mapper;
pub mod model;
pub mod prune;
pub mod quant;
pub mod sim;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{MarsError, Result};
