//! FP8 forward attention: e4m3 block quantization with in-kernel descaling,
//! incoherent preprocessing of Q and K, and the logical layout model of the
//! V-tile transpose and accumulator permutation.

mod forward;
mod layout;

pub use forward::{fp8_flash_fwd, preprocess_incoherent, Fp8AttentionConfig, Quantization};
pub use layout::{
    permute_accumulator, vtile_transpose, vtile_transpose_permuted, LayoutPermutation,
};
