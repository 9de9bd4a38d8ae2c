//! `flashlab`: equivalence checks, gradient checks, the accuracy experiment,
//! FLOPs accounting and pipeline simulation from the command line.
//!
//! Exit status is 0 on success, 1 when a check breaches its tolerance (or a
//! simulated schedule deadlocks), 2 for configuration errors.

mod config;
mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{ExperimentConfig, OutputFormat, PassDirection, Precision, QuantMode};
use flashlab::flash::{Schedule, TileConfig};
use flashlab::formats::FloatFormat;
use flashlab::harness::accuracy::{run_rmse, RmseConfig, Variant};
use flashlab::harness::bench::{run_bench, BenchConfig};
use flashlab::harness::check::{run_check, CheckConfig, CheckKind};
use flashlab::harness::gradcheck::{run_gradcheck, GradcheckConfig};
use flashlab::sim::{
    simulate, simulate_backward, work_model, ResourceModel, ScheduleKind, SimReport, SimShape,
};
use output::Sink;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
        }
    }
}

impl From<flashlab::Error> for CliError {
    fn from(e: flashlab::Error) -> Self {
        match e {
            flashlab::Error::Deadlock(_) | flashlab::Error::NonFinite { .. } => {
                CliError::Failed(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

type Outcome = Result<bool, CliError>;

#[derive(Parser)]
#[command(name = "flashlab", version, about = "Tiled attention laboratory")]
struct Cli {
    /// TOML experiment config; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for output files when no absolute --output is given.
    #[arg(long, global = true, env = "FLASHLAB_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward, schedule and backward equivalence against the FP64 reference.
    Check {
        #[command(flatten)]
        exp: ExperimentConfig,
        /// Offset added to the logsumexp passed to the backward pass.
        #[arg(long, default_value_t = 0.0)]
        corrupt_lse: f64,
    },
    /// RMSE of the low-precision variants on the outlier distribution.
    Rmse {
        #[command(flatten)]
        exp: ExperimentConfig,
    },
    /// FLOPs accounting and emulation timing.
    Bench {
        #[command(flatten)]
        exp: ExperimentConfig,
        /// Report FLOPs only.
        #[arg(long)]
        no_time: bool,
    },
    /// Pipeline schedule simulation.
    Simulate {
        #[command(flatten)]
        exp: ExperimentConfig,
    },
    /// Backward pass against dense gradients and central differences.
    Gradcheck {
        #[command(flatten)]
        exp: ExperimentConfig,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let file = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let (exp, cmd) = match cli.command {
        Command::Check { exp, corrupt_lse } => (exp, Cmd::Check(corrupt_lse)),
        Command::Rmse { exp } => (exp, Cmd::Rmse),
        Command::Bench { exp, no_time } => (exp, Cmd::Bench(no_time)),
        Command::Simulate { exp } => (exp, Cmd::Simulate),
        Command::Gradcheck { exp } => (exp, Cmd::Gradcheck),
    };
    let exp = file.overlay(exp);
    exp.validate()?;
    let sink = Sink::new(
        cli.out_dir,
        exp.output.clone(),
        exp.output_format.unwrap_or(cmd.default_format()),
    );
    match cmd {
        Cmd::Check(corrupt) => cmd_check(&exp, corrupt, &sink),
        Cmd::Rmse => cmd_rmse(&exp, &sink),
        Cmd::Bench(no_time) => cmd_bench(&exp, no_time, &sink),
        Cmd::Simulate => cmd_simulate(&exp, &sink),
        Cmd::Gradcheck => cmd_gradcheck(&exp, &sink),
    }
}

#[derive(Clone, Copy)]
enum Cmd {
    Check(f64),
    Rmse,
    Bench(bool),
    Simulate,
    Gradcheck,
}

impl Cmd {
    fn default_format(self) -> OutputFormat {
        match self {
            Cmd::Rmse | Cmd::Bench(_) => OutputFormat::Csv,
            _ => OutputFormat::Json,
        }
    }
}

fn tile(exp: &ExperimentConfig, default: (usize, usize)) -> Result<TileConfig, CliError> {
    let mut t = TileConfig::new(
        exp.block_rows.unwrap_or(default.0),
        exp.block_cols.unwrap_or(default.1),
    )?;
    if let Some(s) = exp.stages {
        t = t.with_stages(s)?;
    }
    Ok(t)
}

fn cmd_check(exp: &ExperimentConfig, corrupt_lse: f64, sink: &Sink) -> Outcome {
    let mut cfg = CheckConfig {
        corrupt_lse,
        ..CheckConfig::default()
    };
    if let Some(n) = exp.seqlen {
        cfg.seqlens = vec![n];
    }
    if let Some(d) = exp.headdim {
        cfg.headdims = vec![d];
    }
    if exp.block_rows.is_some() || exp.block_cols.is_some() {
        let t = tile(exp, (64, 64))?;
        cfg.tiles = vec![(t.block_rows, t.block_cols)];
    }
    if let Some(c) = exp.causal {
        cfg.causal = vec![c];
    }
    cfg.seed = exp.seed.unwrap_or(cfg.seed);
    let report = run_check(&cfg)?;
    let failed = report.failures().count();
    let max_of = |kind: CheckKind| {
        report
            .cases
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.max_abs_err)
            .fold(0.0, f64::max)
    };
    eprintln!(
        "check: {} cases, {failed} over tolerance; max forward error {:.3e}, max backward error {:.3e}; {} masked tiles skipped",
        report.cases.len(),
        max_of(CheckKind::Forward),
        max_of(CheckKind::Backward),
        report.causal_tiles_skipped()
    );
    for c in report.failures().take(5) {
        eprintln!(
            "  FAIL {:?} {:?} N={} d={} tile={}x{} causal={}: {:.3e} > {:.0e}",
            c.kind,
            c.schedule,
            c.seqlen,
            c.headdim,
            c.block_rows,
            c.block_cols,
            c.causal,
            c.max_abs_err,
            c.tolerance
        );
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        schema: &'static str,
        config: &'a CheckConfig,
        passed: bool,
        causal_tiles_skipped: usize,
        max_forward_err: f64,
        max_schedule_err: f64,
        max_backward_err: f64,
        cases: &'a [flashlab::harness::check::CheckCase],
    }
    const SCHEMA: &str = "flashlab.check/1";
    match sink.format() {
        OutputFormat::Json => sink.json(
            "check",
            &Doc {
                schema: SCHEMA,
                config: &cfg,
                passed: report.passed(),
                causal_tiles_skipped: report.causal_tiles_skipped(),
                max_forward_err: max_of(CheckKind::Forward),
                max_schedule_err: max_of(CheckKind::Schedule),
                max_backward_err: max_of(CheckKind::Backward),
                cases: &report.cases,
            },
        )?,
        OutputFormat::Csv => sink.csv(
            "check",
            report.cases.iter().map(|c| output::Tagged {
                schema: SCHEMA,
                row: c,
            }),
        )?,
    }
    Ok(report.passed())
}

fn fp8_variant(q: QuantMode, incoherent: bool) -> Variant {
    match (q, incoherent) {
        (QuantMode::PerBlock, true) => Variant::Fp8Full,
        (QuantMode::PerTensor, true) => Variant::Fp8NoBlockQuant,
        (QuantMode::PerBlock, false) => Variant::Fp8NoIncoherent,
        (QuantMode::PerTensor, false) => Variant::Fp8PerTensorNoIncoherent,
    }
}

fn cmd_rmse(exp: &ExperimentConfig, sink: &Sink) -> Outcome {
    let d = RmseConfig::default();
    let fp8_selected = exp.quantization.is_some() || exp.incoherent.is_some();
    let variants = match exp.format {
        Some(Precision::Fp16) if fp8_selected => {
            return Err(CliError::Config(
                "quantization and incoherent apply to format fp8 only".into(),
            ))
        }
        Some(Precision::Fp16) => vec![Variant::Fp16Baseline, Variant::Fp16Flash],
        Some(Precision::Fp8) => vec![
            Variant::Fp8Baseline,
            fp8_variant(
                exp.quantization.unwrap_or(QuantMode::PerBlock),
                exp.incoherent.unwrap_or(true),
            ),
        ],
        None if fp8_selected => vec![
            Variant::Fp8Baseline,
            fp8_variant(
                exp.quantization.unwrap_or(QuantMode::PerBlock),
                exp.incoherent.unwrap_or(true),
            ),
        ],
        None => Variant::ALL.to_vec(),
    };
    let cfg = RmseConfig {
        seqlen: exp.seqlen.unwrap_or(d.seqlen),
        headdim: exp.headdim.unwrap_or(d.headdim),
        trials: exp.trials.unwrap_or(d.trials),
        seed: exp.seed.unwrap_or(d.seed),
        tile: tile(exp, (d.tile.block_rows, d.tile.block_cols))?,
        variants,
    };
    let report = run_rmse(&cfg, |t| {
        let parts: Vec<String> = t
            .errors
            .iter()
            .map(|(v, e)| format!("{}={e:.3e}", v.name()))
            .collect();
        eprintln!("trial {} (seed {}): {}", t.trial, t.seed, parts.join(" "));
    })?;
    const SCHEMA: &str = "flashlab.rmse/1";
    let medians: BTreeMap<&str, f64> = cfg
        .variants
        .iter()
        .filter_map(|&v| report.median(v).map(|m| (v.name(), m)))
        .collect();
    match sink.format() {
        OutputFormat::Json => {
            #[derive(Serialize)]
            struct Trial {
                trial: usize,
                seed: u64,
                reference_rms: f64,
                rmse: BTreeMap<&'static str, f64>,
            }
            #[derive(Serialize)]
            struct Doc<'a> {
                schema: &'static str,
                config: &'a RmseConfig,
                trials: Vec<Trial>,
                median: &'a BTreeMap<&'static str, f64>,
            }
            let trials = report
                .trials
                .iter()
                .map(|t| Trial {
                    trial: t.trial,
                    seed: t.seed,
                    reference_rms: t.reference_rms,
                    rmse: t.errors.iter().map(|(v, e)| (v.name(), *e)).collect(),
                })
                .collect();
            sink.json(
                "rmse",
                &Doc {
                    schema: SCHEMA,
                    config: &cfg,
                    trials,
                    median: &medians,
                },
            )?
        }
        OutputFormat::Csv => {
            #[derive(Serialize)]
            struct Row {
                schema: &'static str,
                row: &'static str,
                trial: Option<usize>,
                seed: Option<u64>,
                variant: &'static str,
                rmse: f64,
            }
            let mut rows = Vec::new();
            for t in &report.trials {
                for (v, e) in &t.errors {
                    rows.push(Row {
                        schema: SCHEMA,
                        row: "trial",
                        trial: Some(t.trial),
                        seed: Some(t.seed),
                        variant: v.name(),
                        rmse: *e,
                    });
                }
            }
            for &v in &cfg.variants {
                if let Some(m) = report.median(v) {
                    rows.push(Row {
                        schema: SCHEMA,
                        row: "median",
                        trial: None,
                        seed: None,
                        variant: v.name(),
                        rmse: m,
                    });
                }
            }
            sink.csv("rmse", rows)?
        }
    }
    for (name, m) in &medians {
        eprintln!("median {name}: {m:.4e}");
    }
    Ok(true)
}

fn parse_kernel_schedule(name: &str) -> Result<Schedule, CliError> {
    match name {
        "basic" => Ok(Schedule::Basic),
        "two-stage" | "2stage" => Ok(Schedule::TwoStage),
        "three-stage" | "3stage" => Ok(Schedule::ThreeStage),
        _ => Err(CliError::Config(format!(
            "schedule `{name}` is not one of basic, two-stage, three-stage"
        ))),
    }
}

fn cmd_bench(exp: &ExperimentConfig, no_time: bool, sink: &Sink) -> Outcome {
    let d = BenchConfig::default();
    let base = BenchConfig {
        seqlens: exp.seqlen.map_or(d.seqlens.clone(), |n| vec![n]),
        headdim: exp.headdim.unwrap_or(d.headdim),
        heads: exp.heads.unwrap_or(d.heads),
        causal: exp.causal.unwrap_or(d.causal),
        tile: tile(exp, (d.tile.block_rows, d.tile.block_cols))?,
        schedule: exp
            .schedule
            .as_deref()
            .map_or(Ok(d.schedule), parse_kernel_schedule)?,
        seed: exp.seed.unwrap_or(d.seed),
        time: !no_time,
        ..d
    };
    let rows = match exp.batch {
        None => run_bench(&base)?,
        Some(b) => {
            let mut rows = Vec::new();
            for &n in &base.seqlens {
                rows.extend(run_bench(&BenchConfig {
                    seqlens: vec![n],
                    total_tokens: b * n,
                    ..base.clone()
                })?);
            }
            rows
        }
    };
    const SCHEMA: &str = "flashlab.bench/1";
    for r in &rows {
        eprintln!(
            "{:?} N={} d={} heads={} batch={} causal={}: {} FLOPs{}",
            r.pass,
            r.seqlen,
            r.headdim,
            r.heads,
            r.batch,
            r.causal,
            r.flops,
            r.emulation_gflops
                .map_or(String::new(), |g| format!(", emulation {g:.2} GFLOP/s"))
        );
    }
    match sink.format() {
        OutputFormat::Json => {
            #[derive(Serialize)]
            struct Doc<'a> {
                schema: &'static str,
                throughput_note: &'static str,
                rows: &'a [flashlab::harness::bench::BenchRow],
            }
            sink.json(
                "bench",
                &Doc {
                    schema: SCHEMA,
                    throughput_note: "emulation_gflops is FP64 CPU emulation throughput of one (sequence, head) instance, not comparable to GPU kernels",
                    rows: &rows,
                },
            )?
        }
        OutputFormat::Csv => sink.csv(
            "bench",
            rows.iter().map(|r| output::Tagged {
                schema: SCHEMA,
                row: r,
            }),
        )?,
    }
    Ok(true)
}

#[derive(Serialize)]
struct SimRow {
    schema: &'static str,
    preset: String,
    label: String,
    direction: &'static str,
    seqlen: usize,
    headdim: usize,
    block_rows: usize,
    block_cols: usize,
    query_tiles: usize,
    stages: usize,
    dq_writer: bool,
    makespan: f64,
    iterations: usize,
    cycles_per_iteration: f64,
    tensor_busy: f64,
    mufu_busy: f64,
    load_busy: f64,
    dq_busy: f64,
    tensor_utilization: f64,
    mufu_utilization: f64,
    load_utilization: f64,
    dq_utilization: f64,
    matmul_flops: f64,
    exps: f64,
    softmax_cycle_fraction: f64,
    projected_tflops: f64,
    trace_events: usize,
    infeasible: String,
}

const SIM_SCHEMA: &str = "flashlab.simulate/1";

impl SimRow {
    fn new(preset: &str, r: &SimReport) -> Self {
        SimRow {
            schema: SIM_SCHEMA,
            preset: preset.to_string(),
            label: if r.direction == flashlab::sim::Direction::Backward {
                if r.dq_writer { "bwd+dq-writer" } else { "bwd" }.to_string()
            } else {
                r.kind.label()
            },
            direction: match r.direction {
                flashlab::sim::Direction::Forward => "forward",
                flashlab::sim::Direction::Backward => "backward",
            },
            seqlen: r.shape.seqlen,
            headdim: r.shape.headdim,
            block_rows: r.shape.block_rows,
            block_cols: r.shape.block_cols,
            query_tiles: r.shape.query_tiles,
            stages: r.model.stages,
            dq_writer: r.dq_writer,
            makespan: r.makespan,
            iterations: r.iterations,
            cycles_per_iteration: r.cycles_per_iteration,
            tensor_busy: r.busy.tensor,
            mufu_busy: r.busy.mufu,
            load_busy: r.busy.load,
            dq_busy: r.busy.dq,
            tensor_utilization: r.utilization.tensor,
            mufu_utilization: r.utilization.mufu,
            load_utilization: r.utilization.load,
            dq_utilization: r.utilization.dq,
            matmul_flops: r.matmul_flops,
            exps: r.exps,
            softmax_cycle_fraction: r.softmax_cycle_fraction,
            projected_tflops: r.projected_tflops,
            trace_events: r.trace.len(),
            infeasible: r.infeasible.join("; "),
        }
    }
}

fn cmd_simulate(exp: &ExperimentConfig, sink: &Sink) -> Outcome {
    let mut model = match &exp.model {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            ResourceModel::from_toml_str(&text)?
        }
        None => ResourceModel::default(),
    };
    if let Some(s) = exp.stages {
        model = model.with_stages(s);
    }
    model.validate()?;
    let shape = SimShape::new(
        exp.seqlen.unwrap_or(8192),
        exp.headdim.unwrap_or(128),
        exp.block_rows.unwrap_or(128),
        exp.block_cols.unwrap_or(128),
    )
    .with_query_tiles(exp.query_tiles.unwrap_or(1));
    let format = match exp.format.unwrap_or(Precision::Fp16) {
        Precision::Fp16 => FloatFormat::Fp16,
        Precision::Fp8 => FloatFormat::Fp8E4M3,
    };
    let fp8 = format == FloatFormat::Fp8E4M3;
    let mut reports: Vec<(String, SimReport)> = Vec::new();
    match exp.direction.unwrap_or(PassDirection::Forward) {
        PassDirection::Forward => {
            let name = exp.schedule.as_deref().unwrap_or("full");
            let presets: Vec<(&str, ScheduleKind)> = if name == "ablation" {
                vec![
                    ("full", ScheduleKind::FULL),
                    ("no-overlap", ScheduleKind::WARP_SPECIALIZED),
                    ("no-warpspec", ScheduleKind::OVERLAP_ONLY),
                ]
            } else {
                let kind = ScheduleKind::preset(name).ok_or_else(|| {
                    CliError::Config(format!(
                        "schedule `{name}` is not one of ablation, {}",
                        ScheduleKind::PRESET_NAMES.join(", ")
                    ))
                })?;
                vec![(name, kind)]
            };
            for (preset, kind) in presets {
                reports.push((
                    preset.to_string(),
                    simulate(&shape, &model, kind.with_fp8(fp8))?,
                ));
            }
        }
        PassDirection::Backward => {
            if fp8 {
                return Err(CliError::Config(
                    "the backward simulation is fp16 only".into(),
                ));
            }
            let name = exp.schedule.as_deref().unwrap_or("dq-writer");
            let writers: &[(&str, bool)] = match name {
                "dq-writer" => &[("dq-writer", true)],
                "no-dq-writer" => &[("no-dq-writer", false)],
                "ablation" => &[("dq-writer", true), ("no-dq-writer", false)],
                _ => {
                    return Err(CliError::Config(format!(
                        "backward schedule `{name}` is not one of dq-writer, no-dq-writer, ablation"
                    )))
                }
            };
            for &(preset, writer) in writers {
                reports.push((
                    preset.to_string(),
                    simulate_backward(&shape, &model, writer)?,
                ));
            }
        }
    }
    for (preset, r) in &reports {
        let v = r.validate();
        if let Some(first) = v.first() {
            return Err(CliError::Failed(format!(
                "{preset}: trace has {} protocol violations, first: {first}",
                v.len()
            )));
        }
        eprintln!(
            "{preset} ({}): makespan {:.0} cycles, tensor utilization {:.3}",
            SimRow::new(preset, r).label,
            r.makespan,
            r.utilization.tensor
        );
    }
    let rows: Vec<SimRow> = reports.iter().map(|(p, r)| SimRow::new(p, r)).collect();
    match sink.format() {
        OutputFormat::Json => {
            #[derive(Serialize)]
            struct Doc<'a> {
                schema: &'static str,
                model: &'a ResourceModel,
                shape: &'a SimShape,
                format: &'static str,
                work_model: flashlab::sim::WorkModel,
                rows: &'a [SimRow],
            }
            sink.json(
                "simulate",
                &Doc {
                    schema: SIM_SCHEMA,
                    model: &model,
                    shape: &shape,
                    format: format.name(),
                    work_model: work_model(shape.seqlen, shape.headdim, format, &model)?,
                    rows: &rows,
                },
            )?
        }
        OutputFormat::Csv => sink.csv("simulate", rows.iter())?,
    }
    if let Some(path) = &exp.trace {
        #[derive(Serialize)]
        struct Event<'a> {
            schema: &'static str,
            preset: &'a str,
            index: usize,
            time: f64,
            agent: String,
            action: String,
            block: usize,
            stage: Option<usize>,
        }
        let events = reports.iter().flat_map(|(preset, r)| {
            r.trace.iter().enumerate().map(move |(index, e)| Event {
                schema: "flashlab.trace/1",
                preset,
                index,
                time: e.time,
                agent: e.agent.to_string(),
                action: e.action.to_string(),
                block: e.block,
                stage: e.stage,
            })
        });
        let written = sink.csv_to(path, events)?;
        eprintln!("trace written to {}", written.display());
    }
    Ok(true)
}

fn cmd_gradcheck(exp: &ExperimentConfig, sink: &Sink) -> Outcome {
    let d = GradcheckConfig::default();
    let cfg = GradcheckConfig {
        instances: exp.trials.unwrap_or(d.instances),
        max_seqlen: exp.seqlen.unwrap_or(d.max_seqlen),
        headdims: exp.headdim.map_or(d.headdims.clone(), |h| vec![h]),
        seed: exp.seed.unwrap_or(d.seed),
        ..d
    };
    let report = run_gradcheck(&cfg)?;
    let failed = report.cases.iter().filter(|c| !c.passed).count();
    eprintln!(
        "gradcheck: {} instances, {failed} failed; max error vs dense {:.3e} (tol {:.0e}), vs finite differences {:.3e} (tol {:.0e})",
        report.cases.len(),
        report.max_exact_err(),
        cfg.exact_tol,
        report.max_fd_err(),
        cfg.fd_tol
    );
    const SCHEMA: &str = "flashlab.gradcheck/1";
    match sink.format() {
        OutputFormat::Json => {
            #[derive(Serialize)]
            struct Doc<'a> {
                schema: &'static str,
                passed: bool,
                max_exact_err: f64,
                max_fd_err: f64,
                report: &'a flashlab::harness::gradcheck::GradcheckReport,
            }
            sink.json(
                "gradcheck",
                &Doc {
                    schema: SCHEMA,
                    passed: report.passed(),
                    max_exact_err: report.max_exact_err(),
                    max_fd_err: report.max_fd_err(),
                    report: &report,
                },
            )?
        }
        OutputFormat::Csv => sink.csv(
            "gradcheck",
            report.cases.iter().map(|c| output::Tagged {
                schema: SCHEMA,
                row: c,
            }),
        )?,
    }
    Ok(report.passed())
}
