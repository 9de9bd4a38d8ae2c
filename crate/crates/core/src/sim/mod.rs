//! Discrete-event model of the producer/consumer pipeline.
//!
//! One CTA is simulated. A producer agent streams blocks into s-stage
//! circular buffers, `W` consumer warpgroups run the GEMM/softmax programs
//! of the chosen [`ScheduleKind`], and the backward pass adds a dQ writer.
//! Time is in abstract cycles; rates come from a [`ResourceModel`].
//!
//! The pingpong barrier is idealized: a warpgroup's GEMM phase starts as
//! soon as the previous holder's GEMMs finish, with no scheduling slack.

mod engine;
mod model;
mod programs;
mod trace;

use serde::{Deserialize, Serialize};

pub use model::{work_model, ResourceModel, ScheduleKind, SimShape, WorkModel};
pub use trace::{
    validate_events, Action, Agent, Buffer, BufferStages, GemmKind, TraceEvent, Violation,
    ViolationKind,
};

use crate::error::{invalid, Result};
use engine::{EngineConfig, Op, Program};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Busy cycles or utilization per resource.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceTimes {
    pub tensor: f64,
    pub mufu: f64,
    pub load: f64,
    pub dq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub direction: Direction,
    pub shape: SimShape,
    pub kind: ScheduleKind,
    /// Backward only: whether dQ tiles go through the writer agent.
    pub dq_writer: bool,
    pub model: ResourceModel,
    pub consumers: usize,
    pub buffers: Vec<BufferStages>,
    pub makespan: f64,
    /// Key blocks per query tile (forward) or query blocks (backward).
    pub iterations: usize,
    pub cycles_per_iteration: f64,
    pub busy: ResourceTimes,
    pub utilization: ResourceTimes,
    pub matmul_flops: f64,
    pub exps: f64,
    /// Exponential time over matmul time for the simulated work.
    pub softmax_cycle_fraction: f64,
    /// Whole-GPU throughput implied by the makespan (model projection).
    pub projected_tflops: f64,
    /// Register or shared-memory budgets the configuration exceeds.
    pub infeasible: Vec<String>,
    pub trace: Vec<TraceEvent>,
}

impl SimReport {
    pub fn validate(&self) -> Vec<Violation> {
        validate_trace(self)
    }
}

/// Protocol check of a report's trace; empty when the trace is valid.
pub fn validate_trace(report: &SimReport) -> Vec<Violation> {
    validate_events(
        &report.trace,
        &report.buffers,
        report.consumers,
        report.kind.pingpong,
    )
}

fn check_tiles(shape: &SimShape) -> Result<()> {
    shape.validate()?;
    if shape.query_tiles > shape.row_blocks() {
        return Err(invalid(
            "query_tiles",
            format!(
                "{} exceeds the {} query blocks",
                shape.query_tiles,
                shape.row_blocks()
            ),
        ));
    }
    Ok(())
}

/// Forward pass of one CTA under `kind`.
pub fn simulate(shape: &SimShape, model: &ResourceModel, kind: ScheduleKind) -> Result<SimReport> {
    check_tiles(shape)?;
    model.validate()?;
    kind.validate()?;
    let s = model.stages;
    let buffers = vec![
        BufferStages {
            buffer: Buffer::Q,
            stages: 1,
        },
        BufferStages {
            buffer: Buffer::K,
            stages: s,
        },
        BufferStages {
            buffer: Buffer::V,
            stages: s,
        },
    ];
    let programs = programs::forward(shape, model, kind);
    let infeasible = forward_budget(shape, model, kind);
    let iterations = shape.col_blocks() * shape.query_tiles;
    finish(
        Direction::Forward,
        shape,
        model,
        kind,
        false,
        buffers,
        programs,
        iterations,
        infeasible,
    )
}

/// Backward pass of one CTA owning a single key block, streaming every
/// query block. `dq_writer = false` is the ablation in which consumers
/// accumulate dQ themselves.
pub fn simulate_backward(
    shape: &SimShape,
    model: &ResourceModel,
    dq_writer: bool,
) -> Result<SimReport> {
    shape.validate()?;
    model.validate()?;
    let s = model.stages;
    let buffers = vec![
        BufferStages {
            buffer: Buffer::K,
            stages: 1,
        },
        BufferStages {
            buffer: Buffer::V,
            stages: 1,
        },
        BufferStages {
            buffer: Buffer::Q,
            stages: s,
        },
        BufferStages {
            buffer: Buffer::DO,
            stages: s,
        },
    ];
    let programs = programs::backward(shape, model, dq_writer);
    let infeasible = backward_budget(shape, model);
    finish(
        Direction::Backward,
        shape,
        model,
        ScheduleKind::WARP_SPECIALIZED,
        dq_writer,
        buffers,
        programs,
        shape.row_blocks(),
        infeasible,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    direction: Direction,
    shape: &SimShape,
    model: &ResourceModel,
    kind: ScheduleKind,
    dq_writer: bool,
    buffers: Vec<BufferStages>,
    programs: Vec<Program>,
    iterations: usize,
    infeasible: Vec<String>,
) -> Result<SimReport> {
    let (mut matmul_flops, mut exps) = (0.0, 0.0);
    for op in programs.iter().flat_map(|p| &p.ops) {
        match *op {
            Op::Gemm { flops, .. } => matmul_flops += flops,
            Op::Softmax { ops, .. } => exps += ops,
            _ => {}
        }
    }
    let tensor_rate = model.tensor_rate(kind.fp8);
    let cfg = EngineConfig {
        consumers: model.warpgroups,
        buffers: buffers.clone(),
        tensor_rate,
        mufu_rate: model.mufu_ops_per_cycle,
        load_bytes_per_cycle: model.load_bytes_per_cycle,
        load_latency: model.load_latency_cycles,
        dq_bytes_per_cycle: model.dq_add_bytes_per_cycle,
        dq_slots: model.dq_slots,
        dq_writer,
    };
    let out = engine::run(cfg, programs)?;
    let busy = ResourceTimes {
        tensor: out.tensor_busy,
        mufu: out.mufu_busy,
        load: out.load_busy,
        dq: out.dq_busy,
    };
    let frac = |b: f64| {
        if out.makespan > 0.0 {
            b / out.makespan
        } else {
            0.0
        }
    };
    let utilization = ResourceTimes {
        tensor: frac(busy.tensor),
        mufu: frac(busy.mufu),
        load: frac(busy.load),
        dq: frac(busy.dq),
    };
    let projected_tflops = if out.makespan > 0.0 {
        matmul_flops / out.makespan * model.clock_ghz * 1e9 * model.sm_count as f64 / 1e12
    } else {
        0.0
    };
    Ok(SimReport {
        direction,
        shape: *shape,
        kind,
        dq_writer,
        model: model.clone(),
        consumers: model.warpgroups,
        buffers,
        makespan: out.makespan,
        iterations,
        cycles_per_iteration: out.makespan / iterations as f64,
        busy,
        utilization,
        matmul_flops,
        exps,
        softmax_cycle_fraction: (exps / model.mufu_ops_per_cycle) / (matmul_flops / tensor_rate),
        projected_tflops,
        infeasible,
        trace: out.trace,
    })
}

/// Accumulator registers per consumer warpgroup and staged shared memory.
fn forward_budget(shape: &SimShape, model: &ResourceModel, kind: ScheduleKind) -> Vec<String> {
    let mut flags = Vec::new();
    let rows = shape.block_rows.div_ceil(model.warpgroups);
    let (bc, d) = (shape.block_cols, shape.headdim);
    let depth = programs::effective_overlap(kind.overlap, shape.col_blocks());
    let mut regs = rows * d * 4 + rows * bc * 4;
    if depth >= 2 {
        regs += rows * bc * 4;
    }
    if depth == 3 {
        regs += rows * bc * 2;
    }
    if regs > model.register_bytes_per_warpgroup {
        flags.push(format!(
            "registers: {regs} B of accumulators per warpgroup exceed {} B (B_r={}, B_c={bc}, {depth}-stage)",
            model.register_bytes_per_warpgroup, shape.block_rows
        ));
    }
    let elem = if kind.fp8 { 1 } else { 2 };
    let smem = shape.block_rows * d * elem + 2 * model.stages * bc * d * elem;
    if smem > model.smem_bytes {
        flags.push(format!(
            "shared memory: {smem} B for Q and {} K/V stages exceed {} B",
            model.stages, model.smem_bytes
        ));
    }
    flags
}

fn backward_budget(shape: &SimShape, model: &ResourceModel) -> Vec<String> {
    let mut flags = Vec::new();
    let share = shape.block_cols.div_ceil(model.warpgroups);
    let (br, d) = (shape.block_rows, shape.headdim);
    let regs = share * d * 4 * 2 + share * br * 4 * 2;
    if regs > model.register_bytes_per_warpgroup {
        flags.push(format!(
            "registers: {regs} B of dK/dV/S/dP per warpgroup exceed {} B",
            model.register_bytes_per_warpgroup
        ));
    }
    let smem =
        2 * shape.block_cols * d * 2 + 2 * model.stages * br * d * 2 + model.dq_slots * br * d * 4;
    if smem > model.smem_bytes {
        flags.push(format!(
            "shared memory: {smem} B for K/V, {} Q/dO stages and dQ slots exceed {} B",
            model.stages, model.smem_bytes
        ));
    }
    flags
}

#[cfg(test)]
mod tests;
