//! Desk-scale laboratory for tiled exact attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`dense`]: row-major FP64 matrices, deterministic GEMM, fast
//!   Walsh–Hadamard transforms and the seeded sampler.
//! * [`formats`]: software rounding into fp32/fp16/bf16/e4m3 and the
//!   per-tensor / per-block quantizers.
//! * [`reference`]: materialized FP64 attention (forward and backward) and
//!   the low-precision "standard attention" baselines.
//! * [`flash`]: the tiled online-softmax forward pass in three schedule
//!   variants, the blocked backward pass and FLOPs accounting.
//! * [`fp8`]: the e4m3 forward path with block quantization, incoherent
//!   preprocessing and the accumulator/V-tile permutation pair.
//! * [`sim`]: a deterministic discrete-event model of the producer/consumer
//!   pipeline schedules.
//! * [`harness`]: the experiment drivers shared by the CLI and the
//!   acceptance suite.

pub mod dense;
pub mod error;
pub mod flash;
pub mod formats;
pub mod fp8;
pub mod harness;
pub mod reference;
pub mod sim;

pub use dense::Matrix;
pub use error::{Error, Result};
