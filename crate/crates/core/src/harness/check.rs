//! Equivalence suite: every forward schedule against the FP64 reference,
//! the pipelined schedules against the basic loop, and the blocked backward
//! pass against the dense gradients.

use serde::{Deserialize, Serialize};

use crate::dense::{sample_normal_matrix, Stream};
use crate::error::{invalid, Result};
use crate::flash::{flash_bwd, flash_fwd, Schedule, TileConfig};
use crate::reference::{std_attention_bwd, std_attention_fwd, AttentionInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub seqlens: Vec<usize>,
    pub headdims: Vec<usize>,
    /// `(B_r, B_c)` pairs.
    pub tiles: Vec<(usize, usize)>,
    pub causal: Vec<bool>,
    pub seed: u64,
    pub forward_tol: f64,
    pub backward_tol: f64,
    /// Adds this to every `L` entry handed to the backward pass. Only for
    /// demonstrating that the gradient check catches a bad logsumexp.
    pub corrupt_lse: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            seqlens: vec![1, 37, 128, 300],
            headdims: vec![16, 64],
            tiles: vec![(16, 16), (64, 32), (32, 64)],
            causal: vec![false, true],
            seed: 0,
            forward_tol: 1e-12,
            backward_tol: 1e-11,
            corrupt_lse: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    /// Schedule output and `L` against the FP64 reference.
    Forward,
    /// Pipelined schedule against the basic loop.
    Schedule,
    /// Blocked gradients against the dense backward pass.
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckCase {
    pub kind: CheckKind,
    pub schedule: Schedule,
    pub seqlen: usize,
    pub headdim: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub causal: bool,
    pub max_abs_err: f64,
    /// Largest `|L − L_ref|` over rows with a finite reference (forward only).
    pub max_lse_err: f64,
    pub tiles_skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub cases: Vec<CheckCase>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckCase> {
        self.cases.iter().filter(|c| !c.passed)
    }

    /// Masked tiles skipped over all causal forward cases.
    pub fn causal_tiles_skipped(&self) -> usize {
        self.cases
            .iter()
            .filter(|c| c.causal && c.kind == CheckKind::Forward)
            .map(|c| c.tiles_skipped)
            .sum()
    }
}

fn lse_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y {
                0.0
            } else if y.is_finite() {
                (x - y).abs()
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

pub fn run_check(cfg: &CheckConfig) -> Result<CheckReport> {
    if cfg.seqlens.is_empty()
        || cfg.headdims.is_empty()
        || cfg.tiles.is_empty()
        || cfg.causal.is_empty()
    {
        return Err(invalid(
            "check",
            "every sweep axis needs at least one value",
        ));
    }
    let mut cases = Vec::new();
    let mut case_seed = cfg.seed;
    for &n in &cfg.seqlens {
        for &d in &cfg.headdims {
            for &(br, bc) in &cfg.tiles {
                let tile = TileConfig::new(br, bc)?;
                for &causal in &cfg.causal {
                    case_seed += 1;
                    let q = sample_normal_matrix(n, d, case_seed, Stream::Query);
                    let k = sample_normal_matrix(n, d, case_seed, Stream::Key);
                    let v = sample_normal_matrix(n, d, case_seed, Stream::Value);
                    let d_o = sample_normal_matrix(n, d, case_seed, Stream::OutputGrad);
                    let inputs = AttentionInputs::new(&q, &k, &v)?.with_causal(causal);
                    let exact = std_attention_fwd(&inputs)?;
                    let mut basic = None;
                    for schedule in Schedule::ALL {
                        let out = flash_fwd(&inputs, &tile, schedule)?;
                        let err = out.o.max_abs_diff(&exact.o);
                        let lse = lse_err(&out.l, &exact.l);
                        cases.push(CheckCase {
                            kind: CheckKind::Forward,
                            schedule,
                            seqlen: n,
                            headdim: d,
                            block_rows: br,
                            block_cols: bc,
                            causal,
                            max_abs_err: err,
                            max_lse_err: lse,
                            tiles_skipped: out.audit.tiles_skipped,
                            tolerance: cfg.forward_tol,
                            passed: err <= cfg.forward_tol && lse <= cfg.forward_tol,
                        });
                        match &basic {
                            None => basic = Some(out),
                            Some(b) => {
                                let err = out.o.max_abs_diff(&b.o);
                                let lse = lse_err(&out.l, &b.l);
                                cases.push(CheckCase {
                                    kind: CheckKind::Schedule,
                                    schedule,
                                    seqlen: n,
                                    headdim: d,
                                    block_rows: br,
                                    block_cols: bc,
                                    causal,
                                    max_abs_err: err,
                                    max_lse_err: lse,
                                    tiles_skipped: out.audit.tiles_skipped,
                                    tolerance: cfg.forward_tol,
                                    passed: err <= cfg.forward_tol && lse <= cfg.forward_tol,
                                });
                            }
                        }
                    }
                    let fwd = basic.expect("basic schedule runs first");
                    let l: Vec<f64> = fwd.l.iter().map(|x| x + cfg.corrupt_lse).collect();
                    let grads = flash_bwd(&inputs, &fwd.o, &d_o, &l, &tile)?;
                    let want = std_attention_bwd(&inputs, &exact.p, &d_o)?;
                    let err = grads.max_abs_diff(&want);
                    cases.push(CheckCase {
                        kind: CheckKind::Backward,
                        schedule: Schedule::Basic,
                        seqlen: n,
                        headdim: d,
                        block_rows: br,
                        block_cols: bc,
                        causal,
                        max_abs_err: err,
                        max_lse_err: 0.0,
                        tiles_skipped: fwd.audit.tiles_skipped,
                        tolerance: cfg.backward_tol,
                        passed: err <= cfg.backward_tol,
                    });
                }
            }
        }
    }
    Ok(CheckReport { cases })
}
