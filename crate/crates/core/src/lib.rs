//! Static post-training quantization with fused Hadamard/Cayley rotations for a
//! desk-scale transformer.

pub mod commands;
pub mod error;
pub mod init;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod rotation;
pub mod sensitivity;
pub mod stats;
pub mod synthetic;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use quant::{Granularity, QuantParams, QuantSpec, TensorClass};
pub use stats::RunningStats;
pub use tensor::{IntTensor, Tensor};
