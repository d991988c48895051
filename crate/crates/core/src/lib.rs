//! Ternary quantization-aware training for small volumetric segmentation
//! networks, with a bit-packed storage format for the quantized kernels.

mod bytes;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod par;
pub mod quant;
pub mod segnet;
pub mod tensor;
pub mod verify;
pub mod voldata;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
