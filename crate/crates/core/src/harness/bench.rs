//! FLOPs accounting over the benchmark grid plus wall-clock timing of the
//! FP64 emulation. The timed throughput is a property of this CPU
//! implementation and says nothing about GPU kernels.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dense::{sample_normal_matrix, Stream};
use crate::error::{invalid, Result};
use crate::flash::{flash_bwd, flash_fwd, flops_backward, flops_forward, Schedule, TileConfig};
use crate::reference::AttentionInputs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seqlens: Vec<usize>,
    pub headdim: usize,
    pub heads: usize,
    pub causal: bool,
    /// Batch is `total_tokens / seqlen` (at least 1).
    pub total_tokens: usize,
    pub passes: Vec<Pass>,
    pub tile: TileConfig,
    pub schedule: Schedule,
    pub seed: u64,
    /// Skip the timed run and report FLOPs only.
    pub time: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seqlens: vec![512, 1024, 2048],
            headdim: 64,
            heads: 32,
            causal: false,
            total_tokens: 16384,
            passes: vec![Pass::Forward, Pass::Backward],
            tile: TileConfig::default(),
            schedule: Schedule::TwoStage,
            seed: 0,
            time: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub pass: Pass,
    pub seqlen: usize,
    pub headdim: usize,
    pub heads: usize,
    pub batch: usize,
    pub causal: bool,
    /// Formula FLOPs of one sequence over all heads.
    pub flops: u64,
    /// `flops × batch`.
    pub total_flops: u64,
    /// Seconds for one (sequence, head) instance of the emulation.
    pub seconds: Option<f64>,
    /// Emulation throughput of that instance, GFLOP/s.
    pub emulation_gflops: Option<f64>,
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.seqlens.is_empty() || cfg.seqlens.contains(&0) {
        return Err(invalid(
            "seqlen",
            "need at least one positive sequence length",
        ));
    }
    if cfg.headdim == 0 || cfg.heads == 0 || cfg.total_tokens == 0 {
        return Err(invalid(
            "headdim",
            "head dimension, heads and total tokens must be positive",
        ));
    }
    cfg.tile.validate()?;
    let mut rows = Vec::new();
    for &n in &cfg.seqlens {
        let batch = (cfg.total_tokens / n).max(1);
        let d = cfg.headdim;
        let (un, ud, uh) = (n as u64, d as u64, cfg.heads as u64);
        let timed = if cfg.time {
            let q = sample_normal_matrix(n, d, cfg.seed, Stream::Query);
            let k = sample_normal_matrix(n, d, cfg.seed, Stream::Key);
            let v = sample_normal_matrix(n, d, cfg.seed, Stream::Value);
            let d_o = sample_normal_matrix(n, d, cfg.seed, Stream::OutputGrad);
            let inputs = AttentionInputs::new(&q, &k, &v)?.with_causal(cfg.causal);
            let start = Instant::now();
            let fwd = flash_fwd(&inputs, &cfg.tile, cfg.schedule)?;
            let fwd_secs = start.elapsed().as_secs_f64();
            let start = Instant::now();
            flash_bwd(&inputs, &fwd.o, &d_o, &fwd.l, &cfg.tile)?;
            Some((fwd_secs, start.elapsed().as_secs_f64()))
        } else {
            None
        };
        for &pass in &cfg.passes {
            let (flops, one_head, secs) = match pass {
                Pass::Forward => (
                    flops_forward(un, ud, uh, cfg.causal),
                    flops_forward(un, ud, 1, cfg.causal),
                    timed.map(|t| t.0),
                ),
                Pass::Backward => (
                    flops_backward(un, ud, uh, cfg.causal),
                    flops_backward(un, ud, 1, cfg.causal),
                    timed.map(|t| t.1),
                ),
            };
            rows.push(BenchRow {
                pass,
                seqlen: n,
                headdim: d,
                heads: cfg.heads,
                batch,
                causal: cfg.causal,
                flops,
                total_flops: flops * batch as u64,
                seconds: secs,
                emulation_gflops: secs.map(|s| one_head as f64 / s.max(1e-12) / 1e9),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_flops_and_batch() {
        let cfg = BenchConfig {
            seqlens: vec![512, 16384, 20000],
            time: false,
            ..BenchConfig::default()
        };
        let rows = run_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].flops, 2_147_483_648);
        assert_eq!(rows[0].batch, 32);
        assert_eq!(rows[0].total_flops, 32 * 2_147_483_648);
        assert_eq!(rows[1].pass, Pass::Backward);
        assert_eq!(rows[1].flops * 2, rows[0].flops * 5);
        assert_eq!(rows[2].batch, 1);
        assert_eq!(rows[4].batch, 1);
        assert!(rows.iter().all(|r| r.seconds.is_none()));
    }

    #[test]
    fn causal_halves_and_timing_is_reported() {
        let cfg = BenchConfig {
            seqlens: vec![128],
            causal: true,
            tile: TileConfig::new(32, 32).unwrap(),
            ..BenchConfig::default()
        };
        let rows = run_bench(&cfg).unwrap();
        assert_eq!(rows[0].flops, flops_forward(128, 64, 32, false) / 2);
        assert!(rows.iter().all(|r| r.seconds.unwrap() > 0.0));
        assert!(rows.iter().all(|r| r.emulation_gflops.unwrap() > 0.0));
    }
}
