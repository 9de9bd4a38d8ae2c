//! Software emulation of low-precision floating-point formats and the
//! per-tensor / per-block quantization schemes built on them.

pub(crate) mod lowp;
mod quant;
mod round;

pub use quant::{
    cast, dequantize, emulated_matmul, quantize_per_block, quantize_per_tensor, QuantizedTensor,
    Scales,
};
pub use round::{round_to, round_to_with, FloatFormat, Overflow};
