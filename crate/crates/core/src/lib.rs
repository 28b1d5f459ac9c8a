//! Post-training quantization of toy transformer blocks: uniform affine
//! quantization, channel disassembly/assembly for activation outliers with
//! a per-layer threshold search, and low-rank error correction.

pub mod attention;
pub mod correction;
pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod quant;
pub mod reassembly;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
