//! Tiled attention with online softmax: three forward schedules, the blocked
//! backward pass, FLOP accounting and the emulated low-precision engine.

mod backward;
mod config;
mod forward;
mod grouped;
pub(crate) mod lowprec;
mod softmax;

pub use backward::{bwd_preprocess, flash_bwd, flash_bwd_with_audit, BackwardAudit};
pub use config::TileConfig;
pub use forward::{
    flash_fwd, flash_fwd_2stage, flash_fwd_3stage, flash_fwd_basic, ForwardAudit, ForwardOutput,
    Schedule,
};
pub use grouped::flash_fwd_grouped;
pub use lowprec::flash_fwd_fp16;
pub use softmax::{online_softmax_step, SoftmaxState};

/// Forward FLOPs of attention: `4·N²·d·heads`, halved under a causal mask.
pub fn flops_forward(seqlen: u64, headdim: u64, heads: u64, causal: bool) -> u64 {
    let full = 4 * seqlen * seqlen * headdim * heads;
    if causal {
        full / 2
    } else {
        full
    }
}

/// Backward FLOPs: 2.5× the forward count.
pub fn flops_backward(seqlen: u64, headdim: u64, heads: u64, causal: bool) -> u64 {
    flops_forward(seqlen, headdim, heads, causal) * 5 / 2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_counts() {
        assert_eq!(flops_forward(512, 64, 32, false), 2_147_483_648);
        assert_eq!(flops_forward(512, 64, 32, true), 1_073_741_824);
        assert_eq!(flops_backward(512, 64, 32, false), 5_368_709_120);
        for n in [512u64, 1024, 2048, 4096, 8192, 16384] {
            for d in [64u64, 128, 256] {
                let f = flops_forward(n, d, 16, false);
                assert_eq!(f, 4 * n * n * d * 16);
                assert_eq!(2 * flops_forward(n, d, 16, true), f);
                assert_eq!(2 * flops_backward(n, d, 16, false), 5 * f);
            }
        }
    }
}
