use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::formats::FloatFormat;

/// Per-SM throughputs and capacities, in bytes, FLOPs and cycles.
///
/// The defaults describe one H100 SXM5 SM at 1830 MHz:
/// 989 TFLOP/s of fp16 matmul and 3.9 TFLOP/s of special functions over
/// 132 SMs give ≈4094 and ≈16.1 per cycle, rounded to 4096 and 16. Loads
/// are modeled at the L2-served rate (≈12 TB/s aggregate, 49.7 B/cycle per
/// SM) because every K/V tile is shared by all query-tile CTAs of a head;
/// the 3.35 TB/s HBM figure would make every schedule load-bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceModel {
    /// Dense fp16 matmul FLOPs per cycle (doubled under the fp8 flag).
    pub tensor_flops_per_cycle: f64,
    /// Exponentials per cycle.
    pub mufu_ops_per_cycle: f64,
    /// Cycles between the end of a transfer and its commit.
    pub load_latency_cycles: f64,
    /// Transfer rate of the load channel; `inf` removes transfer time.
    pub load_bytes_per_cycle: f64,
    /// Consumer warpgroups per CTA.
    pub warpgroups: usize,
    /// Circular-buffer depth `s`.
    pub stages: usize,
    /// Producer V-tile transpose rate on the fp8 path.
    pub transpose_bytes_per_cycle: f64,
    /// Serialized dQ accumulation rate (backward).
    pub dq_add_bytes_per_cycle: f64,
    /// Shared-memory staging slots for dQ tiles awaiting the writer.
    pub dq_slots: usize,
    /// Register file share per consumer warpgroup, for feasibility flags.
    pub register_bytes_per_warpgroup: usize,
    pub smem_bytes: usize,
    pub clock_ghz: f64,
    pub sm_count: usize,
}

impl Default for ResourceModel {
    fn default() -> Self {
        Self {
            tensor_flops_per_cycle: 4096.0,
            mufu_ops_per_cycle: 16.0,
            load_latency_cycles: 800.0,
            load_bytes_per_cycle: 49.7,
            warpgroups: 2,
            stages: 2,
            transpose_bytes_per_cycle: 128.0,
            dq_add_bytes_per_cycle: 32.0,
            dq_slots: 2,
            register_bytes_per_warpgroup: 240 * 128 * 4,
            smem_bytes: 228 * 1024,
            clock_ghz: 1.83,
            sm_count: 132,
        }
    }
}

impl ResourceModel {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let model: Self =
            toml::from_str(text).map_err(|e| invalid("resource model", e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("resource model serializes")
    }

    pub fn with_stages(mut self, stages: usize) -> Self {
        self.stages = stages;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("tensor_flops_per_cycle", self.tensor_flops_per_cycle),
            ("mufu_ops_per_cycle", self.mufu_ops_per_cycle),
            ("load_bytes_per_cycle", self.load_bytes_per_cycle),
            ("transpose_bytes_per_cycle", self.transpose_bytes_per_cycle),
            ("dq_add_bytes_per_cycle", self.dq_add_bytes_per_cycle),
            ("clock_ghz", self.clock_ghz),
        ];
        for (name, r) in rates {
            if r.is_nan() || r <= 0.0 {
                return Err(invalid(name, format!("must be positive, got {r}")));
            }
        }
        if self.load_latency_cycles.is_nan() || self.load_latency_cycles < 0.0 {
            return Err(invalid("load_latency_cycles", "must be non-negative"));
        }
        for (name, n) in [
            ("warpgroups", self.warpgroups),
            ("stages", self.stages),
            ("dq_slots", self.dq_slots),
            ("sm_count", self.sm_count),
        ] {
            if n == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub(crate) fn tensor_rate(&self, fp8: bool) -> f64 {
        if fp8 {
            2.0 * self.tensor_flops_per_cycle
        } else {
            self.tensor_flops_per_cycle
        }
    }
}

/// Which of the pipeline techniques are switched on.
///
/// `overlap` is the intra-warpgroup GEMM/softmax pipeline depth: 1 runs the
/// two GEMMs and the softmax of an iteration back to back, 2 and 3 are the
/// 2- and 3-stage variants. Overlap without warp specialization is allowed
/// so the "no warp specialization" ablation can be expressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleKind {
    pub warp_specialized: bool,
    pub pingpong: bool,
    pub overlap: u8,
    #[serde(default)]
    pub fp8: bool,
}

impl ScheduleKind {
    /// No producer warps, no pingpong, no overlap.
    pub const SERIAL: Self = Self::new(false, false, 1);
    /// Producer/consumer split only.
    pub const WARP_SPECIALIZED: Self = Self::new(true, false, 1);
    pub const PINGPONG: Self = Self::new(true, true, 1);
    /// Pingpong plus 2-stage overlap: the full forward schedule.
    pub const FULL: Self = Self::new(true, true, 2);
    pub const FULL_3STAGE: Self = Self::new(true, true, 3);
    /// 2-stage overlap with synchronous loads issued by the consumers.
    pub const OVERLAP_ONLY: Self = Self::new(false, false, 2);

    pub const fn new(warp_specialized: bool, pingpong: bool, overlap: u8) -> Self {
        Self {
            warp_specialized,
            pingpong,
            overlap,
            fp8: false,
        }
    }

    pub const fn with_fp8(mut self, fp8: bool) -> Self {
        self.fp8 = fp8;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.overlap) {
            return Err(invalid(
                "overlap",
                format!("must be 1, 2 or 3, got {}", self.overlap),
            ));
        }
        if self.pingpong && !self.warp_specialized {
            return Err(invalid("pingpong", "requires warp specialization"));
        }
        Ok(())
    }

    pub const PRESET_NAMES: [&'static str; 10] = [
        "serial",
        "warp-specialized",
        "warpspec-only",
        "pingpong",
        "no-overlap",
        "full",
        "pingpong-2stage",
        "pingpong-3stage",
        "overlap-only",
        "no-warpspec",
    ];

    /// Preset names accepted by the CLI. `no-overlap` is warp specialization
    /// alone; `no-warpspec` keeps the 2-stage overlap with synchronous loads.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "serial" => Self::SERIAL,
            "warp-specialized" | "warpspec-only" | "no-overlap" => Self::WARP_SPECIALIZED,
            "pingpong" => Self::PINGPONG,
            "full" | "pingpong-2stage" => Self::FULL,
            "pingpong-3stage" => Self::FULL_3STAGE,
            "overlap-only" | "no-warpspec" => Self::OVERLAP_ONLY,
            _ => return None,
        })
    }

    pub fn label(&self) -> String {
        let mut s = String::from(if self.warp_specialized {
            "ws"
        } else {
            "sync-loads"
        });
        if self.pingpong {
            s.push_str("+pingpong");
        }
        if self.overlap > 1 {
            s.push_str(&format!("+{}stage", self.overlap));
        }
        if self.fp8 {
            s.push_str("+fp8");
        }
        s
    }
}

/// One CTA's work: `query_tiles` consecutive tiles of `block_rows` queries,
/// each sweeping all key blocks of a length-`seqlen` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimShape {
    pub seqlen: usize,
    pub headdim: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    #[serde(default = "one")]
    pub query_tiles: usize,
}

fn one() -> usize {
    1
}

impl SimShape {
    pub fn new(seqlen: usize, headdim: usize, block_rows: usize, block_cols: usize) -> Self {
        Self {
            seqlen,
            headdim,
            block_rows,
            block_cols,
            query_tiles: 1,
        }
    }

    pub fn with_query_tiles(mut self, tiles: usize) -> Self {
        self.query_tiles = tiles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("seqlen", self.seqlen),
            ("headdim", self.headdim),
            ("block_rows", self.block_rows),
            ("block_cols", self.block_cols),
            ("query_tiles", self.query_tiles),
        ] {
            if n == 0 {
                return Err(invalid(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// `T_r`.
    pub fn row_blocks(&self) -> usize {
        self.seqlen.div_ceil(self.block_rows)
    }

    /// `T_c`.
    pub fn col_blocks(&self) -> usize {
        self.seqlen.div_ceil(self.block_cols)
    }

    pub(crate) fn col_len(&self, j: usize) -> usize {
        self.block_cols.min(self.seqlen - j * self.block_cols)
    }

    pub(crate) fn row_len(&self, i: usize) -> usize {
        self.block_rows.min(self.seqlen - i * self.block_rows)
    }
}

/// Per-score-entry work balance of the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkModel {
    /// Matmul FLOPs per exponential: `2·2·d`.
    pub matmul_flops_per_exp: f64,
    /// Exponential time over matmul time for the same scores.
    pub softmax_cycle_fraction: f64,
    /// Exponential time over matmul plus exponential time.
    pub exp_share: f64,
    pub total_matmul_flops: f64,
    pub total_exps: f64,
}

/// Balance between the two GEMMs and the exponentials of one score entry.
///
/// Only fp16/bf16 and fp8 are meaningful; fp8 doubles the matmul rate and
/// leaves the exponential rate alone.
pub fn work_model(
    seqlen: usize,
    headdim: usize,
    format: FloatFormat,
    model: &ResourceModel,
) -> Result<WorkModel> {
    if seqlen == 0 || headdim == 0 {
        return Err(invalid("work_model", "dimensions must be positive"));
    }
    let fp8 = match format {
        FloatFormat::Fp16 | FloatFormat::Bf16 => false,
        FloatFormat::Fp8E4M3 => true,
        other => {
            return Err(crate::Error::UnsupportedFormat {
                op: "work_model",
                format: other.to_string(),
            })
        }
    };
    let per_exp = 4.0 * headdim as f64;
    let matmul_time = per_exp / model.tensor_rate(fp8);
    let exp_time = 1.0 / model.mufu_ops_per_cycle;
    let entries = seqlen as f64 * seqlen as f64;
    Ok(WorkModel {
        matmul_flops_per_exp: per_exp,
        softmax_cycle_fraction: exp_time / matmul_time,
        exp_share: exp_time / (matmul_time + exp_time),
        total_matmul_flops: per_exp * entries,
        total_exps: entries,
    })
}
