//! `mla`: equivalence checks, cost-model sweeps, crossover threshold,
//! HBM footprint and continuous-batching simulation.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 usage or config
//! error, 3 property violation, 4 cache capacity exceeded.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mla_engine::costmodel::{crossover_batch, hbm_footprint, sweep, Method};
use mla_engine::equivalence::{run_equivalence, EquivalenceReport, EquivalenceSettings};
use mla_engine::hybrid::Branch;
use mla_engine::mla::MlaConfig;
use mla_engine::simbench::{run_simulation, speedup_report, LengthDist, SimConfig, SimReport, StepTrace, WorkloadSpec};
use mla_engine::Error;
use serde::Serialize;

use config::{FileConfig, Format};
use output::{RunManifest, Sink};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_VIOLATION: u8 = 3;
const EXIT_CAPACITY: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "mla",
    version,
    about = "Multi-head latent attention engine, cost model and simulator"
)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write `<table>.{csv,jsonl}` plus manifest sidecars here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Model preset (deepseek-v3, kimi-k2).
    #[arg(long, global = true)]
    model: Option<String>,
    /// Hardware preset (ascend-910-class, fig2-npu, gpu-h-class).
    #[arg(long, global = true)]
    hardware: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check naive, absorb and hybrid attention agree on random small shapes.
    Equivalence(EquivalenceArgs),
    /// Roofline throughput per method and batch size.
    Roofline(RooflineArgs),
    /// Batch size where the naive shared part overtakes absorb.
    Threshold,
    /// Per-device HBM usage and expanded-prefix overhead.
    Footprint(FootprintArgs),
    /// Continuous-batching decode simulation.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
    Both,
}

#[derive(Debug, Args)]
struct EquivalenceArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    /// Override the default tolerance (1e-10 for f64, 1e-5 for f32).
    #[arg(long)]
    tolerance: Option<f64>,
    /// Perturb one weight in the absorb path's copy; the check must fail.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct RooflineArgs {
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    batches: Option<Vec<u64>>,
    #[arg(long)]
    s_q: Option<u64>,
    #[arg(long = "l-s", value_delimiter = ',')]
    l_s: Option<Vec<u64>>,
    #[arg(long = "l-n", value_delimiter = ',')]
    l_n: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
struct FootprintArgs {
    #[arg(long, value_delimiter = ',')]
    batches: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    max_seqs: Option<Vec<u64>>,
    #[arg(long = "l-s")]
    l_s: Option<u64>,
    /// Report the absorb-only baseline (no expanded prefix).
    #[arg(long)]
    no_typhoon: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodChoice {
    Naive,
    Absorb,
    Typhoon,
    All,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = MethodChoice::All)]
    method: MethodChoice,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    prefix_len: Option<usize>,
    /// Fixed per-request tail length.
    #[arg(long)]
    tail_len: Option<usize>,
    /// Fixed per-request generation length.
    #[arg(long)]
    gen_len: Option<usize>,
    #[arg(long)]
    requests: Option<usize>,
    /// Run the real attention math at reduced dims.
    #[arg(long)]
    execute: bool,
    /// With --execute, compare every step against the other branch.
    #[arg(long)]
    parity_check: bool,
    /// Also emit per-step traces.
    #[arg(long)]
    traces: bool,
    /// Produce a speedup table over these batch sizes instead.
    #[arg(long, value_delimiter = ',')]
    sweep_batches: Option<Vec<usize>>,
}

enum Failure {
    Engine(Error),
    Io(std::io::Error),
    Violation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Engine(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

struct Ctx {
    cfg: FileConfig,
    seed: u64,
    sink: Sink,
}

impl Ctx {
    fn emit<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<(), Failure> {
        Ok(self.sink.table(name, rows)?)
    }
}

#[derive(Serialize)]
struct EquivalenceRow {
    precision: &'static str,
    trials: usize,
    tolerance: f64,
    max_rel_naive_absorb: f64,
    max_rel_naive_typhoon: f64,
    max_rel_absorb_typhoon: f64,
    max_lse_diff: f64,
    violations: usize,
    passed: bool,
}

impl From<&EquivalenceReport> for EquivalenceRow {
    fn from(r: &EquivalenceReport) -> Self {
        Self {
            precision: r.precision,
            trials: r.trials,
            tolerance: r.tolerance,
            max_rel_naive_absorb: r.max_rel_naive_absorb,
            max_rel_naive_typhoon: r.max_rel_naive_typhoon,
            max_rel_absorb_typhoon: r.max_rel_absorb_typhoon,
            max_lse_diff: r.max_lse_diff,
            violations: r.violations,
            passed: r.passed(),
        }
    }
}

fn cmd_equivalence(ctx: &mut Ctx, a: &EquivalenceArgs) -> Result<(), Failure> {
    if a.trials == 0 {
        return Err(Error::Argument("--trials must be at least 1".into()).into());
    }
    let settings = |tol: f64| {
        let mut s = EquivalenceSettings::new(a.trials, ctx.seed, a.tolerance.unwrap_or(tol));
        s.inject_fault = a.inject_fault;
        s
    };
    let mut reports = Vec::new();
    if matches!(a.precision, Precision::F64 | Precision::Both) {
        reports.push(run_equivalence::<f64>(&settings(
            EquivalenceSettings::default_tolerance::<f64>(),
        ))?);
    }
    if matches!(a.precision, Precision::F32 | Precision::Both) {
        reports.push(run_equivalence::<f32>(&settings(
            EquivalenceSettings::default_tolerance::<f32>(),
        ))?);
    }
    let rows: Vec<EquivalenceRow> = reports.iter().map(EquivalenceRow::from).collect();
    ctx.emit("equivalence", &rows)?;
    let bad: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            format!(
                "{}: {} of {} trials beyond {:e}",
                r.precision, r.violations, r.trials, r.tolerance
            )
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violation(bad.join("; ")))
    }
}

fn cmd_roofline(ctx: &mut Ctx) -> Result<(), Failure> {
    let model = ctx.cfg.model.resolve()?;
    let hw = ctx.cfg.hardware.resolve()?;
    let rows = sweep(&ctx.cfg.sweep.spec(), &model, &hw)?;
    ctx.emit("roofline", &rows)
}

#[derive(Serialize)]
struct ThresholdRow {
    model: String,
    hardware: String,
    peak_flops: f64,
    hbm_bandwidth: f64,
    dtype_bytes: f64,
    analytic: f64,
    integer: u64,
    rounded: u64,
    policy_threshold: usize,
}

fn cmd_threshold(ctx: &mut Ctx) -> Result<(), Failure> {
    let model = ctx.cfg.model.resolve()?;
    let hw = ctx.cfg.hardware.resolve()?;
    let x = crossover_batch(&model, &hw);
    let policy = ctx.cfg.policy.resolve(&model, &hw)?;
    let row = ThresholdRow {
        model: ctx.cfg.model.preset.clone(),
        hardware: hw.name.clone(),
        peak_flops: hw.peak_flops,
        hbm_bandwidth: hw.hbm_bandwidth,
        dtype_bytes: hw.dtype_bytes,
        analytic: x.analytic,
        integer: x.integer,
        rounded: x.rounded,
        policy_threshold: policy.threshold_batch,
    };
    ctx.emit("threshold", &[row])
}

#[derive(Serialize)]
struct FootprintRow {
    batch: u64,
    max_seq: u64,
    l_s: u64,
    use_typhoon: bool,
    weights_bytes: f64,
    compressed_cache_bytes: f64,
    expanded_shared_bytes: f64,
    total_bytes: f64,
    overhead_pct: f64,
    expanded_shared_per_layer_unsharded_bytes: f64,
}

fn cmd_footprint(ctx: &mut Ctx) -> Result<(), Failure> {
    let f = &ctx.cfg.footprint;
    if f.batches.is_empty() || f.max_seqs.is_empty() {
        return Err(Error::Config("footprint grid needs at least one batch and max_seq".into()).into());
    }
    let model = ctx.cfg.model.resolve()?;
    let f = &ctx.cfg.footprint;
    let mut rows = Vec::new();
    for &b in &f.batches {
        for &s in &f.max_seqs {
            let r = hbm_footprint(&model, &f.parallelism, b, s, f.l_s, f.use_typhoon)?;
            rows.push(FootprintRow {
                batch: r.batch,
                max_seq: r.max_seq,
                l_s: r.l_s,
                use_typhoon: r.use_typhoon,
                weights_bytes: r.weights,
                compressed_cache_bytes: r.compressed_cache,
                expanded_shared_bytes: r.expanded_shared,
                total_bytes: r.total,
                overhead_pct: r.overhead_ratio * 100.0,
                expanded_shared_per_layer_unsharded_bytes: r.expanded_shared_per_layer_unsharded,
            });
        }
    }
    ctx.emit("footprint", &rows)
}

#[derive(Serialize)]
struct SimSummaryRow {
    method: Method,
    cost_model: String,
    engine_heads: usize,
    engine_kv_lora_rank: usize,
    hardware: String,
    executed: bool,
    batch_size: usize,
    prefix_len: usize,
    requests: usize,
    threshold_batch: usize,
    steps: usize,
    hybrid_steps: usize,
    total_tokens: usize,
    stage1_attn_s: f64,
    stage2_attn_s: f64,
    wkvb1_proj_s: f64,
    wkvb2_proj_s: f64,
    combine_lse_s: f64,
    shared_attn_s: f64,
    nonshared_attn_s: f64,
    modeled_time_s: f64,
    throughput_tokens_per_s: f64,
    wall_time_s: f64,
    max_parity_rel_err: Option<f64>,
    peak_pages_used: usize,
}

fn summary(r: &SimReport, model: &str) -> SimSummaryRow {
    SimSummaryRow {
        method: r.method,
        cost_model: model.to_string(),
        engine_heads: r.engine_config.num_heads,
        engine_kv_lora_rank: r.engine_config.kv_lora_rank,
        hardware: r.hardware.name.clone(),
        executed: r.executed,
        batch_size: r.workload.batch_size,
        prefix_len: r.workload.prefix_len,
        requests: r.requests_completed,
        threshold_batch: r.threshold_batch,
        steps: r.steps,
        hybrid_steps: r.hybrid_steps,
        total_tokens: r.total_tokens,
        stage1_attn_s: r.modeled.stage1_attn,
        stage2_attn_s: r.modeled.stage2_attn,
        wkvb1_proj_s: r.modeled.wkvb1_proj,
        wkvb2_proj_s: r.modeled.wkvb2_proj,
        combine_lse_s: r.modeled.combine_lse,
        shared_attn_s: r.shared_attn_s,
        nonshared_attn_s: r.nonshared_attn_s,
        modeled_time_s: r.modeled_time_s,
        throughput_tokens_per_s: r.throughput_tokens_per_s,
        wall_time_s: r.wall_time_s,
        max_parity_rel_err: r.max_parity_rel_err,
        peak_pages_used: r.peak_pages_used,
    }
}

#[derive(Serialize)]
struct TraceRow {
    method: Method,
    step: usize,
    batch: usize,
    branch: Branch,
    tail_tokens: usize,
    stage1_attn_s: f64,
    stage2_attn_s: f64,
    wkvb1_proj_s: f64,
    wkvb2_proj_s: f64,
    combine_lse_s: f64,
    step_time_s: f64,
}

fn trace_row(method: Method, t: &StepTrace) -> TraceRow {
    TraceRow {
        method,
        step: t.step,
        batch: t.batch,
        branch: t.branch,
        tail_tokens: t.tail_tokens,
        stage1_attn_s: t.stage1_attn_s,
        stage2_attn_s: t.stage2_attn_s,
        wkvb1_proj_s: t.wkvb1_proj_s,
        wkvb2_proj_s: t.wkvb2_proj_s,
        combine_lse_s: t.combine_lse_s,
        step_time_s: t.step_time_s,
    }
}

fn cmd_simulate(ctx: &mut Ctx, a: &SimulateArgs) -> Result<(), Failure> {
    let model = ctx.cfg.model.resolve()?;
    let hw = ctx.cfg.hardware.resolve()?;
    let w = &ctx.cfg.workload;
    let spec = WorkloadSpec {
        batch_size: w.batch_size,
        prefix_len: w.prefix_len,
        tail_len: w.tail_len.clone(),
        gen_len: w.gen_len.clone(),
        requests: w.requests.unwrap_or(w.batch_size),
        seed: ctx.seed,
    };
    let engine = MlaConfig::tiny(ctx.cfg.engine.num_heads, ctx.cfg.engine.kv_lora_rank);
    engine.validate()?;
    let sim = SimConfig {
        engine,
        policy: ctx.cfg.policy.resolve(&model, &hw)?,
        block_size: ctx.cfg.cache.block_size,
        num_pages: ctx.cfg.cache.num_pages,
        execute: a.execute,
        parity_check: a.execute && a.parity_check,
        weight_seed: ctx.seed,
        ..SimConfig::new(model, hw)
    };

    if let Some(batches) = &a.sweep_batches {
        let rows = speedup_report(&spec, &sim, batches)?;
        return ctx.emit("speedup", &rows);
    }

    let methods = match a.method {
        MethodChoice::Naive => vec![Method::Naive],
        MethodChoice::Absorb => vec![Method::Absorb],
        MethodChoice::Typhoon => vec![Method::Typhoon],
        MethodChoice::All => vec![Method::Naive, Method::Absorb, Method::Typhoon],
    };
    let reports = methods
        .iter()
        .map(|&m| run_simulation(&spec, m, &sim))
        .collect::<Result<Vec<_>, _>>()?;
    let preset = ctx.cfg.model.preset.clone();
    let rows: Vec<SimSummaryRow> = reports.iter().map(|r| summary(r, &preset)).collect();
    ctx.emit("simulate", &rows)?;
    if a.traces {
        let traces: Vec<TraceRow> = reports
            .iter()
            .flat_map(|r| r.traces.iter().map(move |t| trace_row(r.method, t)))
            .collect();
        ctx.emit("simulate_traces", &traces)?;
    }
    if let Some(err) = reports.iter().filter_map(|r| r.max_parity_rel_err).reduce(f64::max) {
        if err > 1e-5 {
            return Err(Failure::Violation(format!("branch parity error {err:e} exceeds 1e-5")));
        }
    }
    Ok(())
}

/// Fold subcommand flags into the config so the manifest records what ran.
fn apply_flags(cfg: &mut FileConfig, command: &Command) {
    match command {
        Command::Roofline(a) => {
            let s = &mut cfg.sweep;
            if let Some(v) = &a.methods {
                s.methods = v.clone();
            }
            if let Some(v) = &a.batches {
                s.batches = v.clone();
            }
            if let Some(v) = a.s_q {
                s.s_q = v;
            }
            if let Some(v) = &a.l_s {
                s.l_s = v.clone();
            }
            if let Some(v) = &a.l_n {
                s.l_n = v.clone();
            }
        }
        Command::Footprint(a) => {
            let f = &mut cfg.footprint;
            if let Some(v) = &a.batches {
                f.batches = v.clone();
            }
            if let Some(v) = &a.max_seqs {
                f.max_seqs = v.clone();
            }
            if let Some(v) = a.l_s {
                f.l_s = v;
            }
            if a.no_typhoon {
                f.use_typhoon = false;
            }
        }
        Command::Simulate(a) => {
            let w = &mut cfg.workload;
            if let Some(v) = a.batch_size {
                w.batch_size = v;
            }
            if let Some(v) = a.prefix_len {
                w.prefix_len = v;
            }
            if let Some(v) = a.tail_len {
                w.tail_len = LengthDist::fixed(v);
            }
            if let Some(v) = a.gen_len {
                w.gen_len = LengthDist::fixed(v);
            }
            if let Some(v) = a.requests {
                w.requests = Some(v);
            }
        }
        Command::Equivalence(_) | Command::Threshold => {}
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Equivalence(_) => "equivalence",
        Command::Roofline(_) => "roofline",
        Command::Threshold => "threshold",
        Command::Footprint(_) => "footprint",
        Command::Simulate(_) => "simulate",
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = config::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(m) = &cli.model {
        cfg.model.preset = m.clone();
    }
    if let Some(h) = &cli.hardware {
        cfg.hardware.preset = h.clone();
    }
    if let Some(f) = cli.format {
        cfg.output.format = f;
    }
    apply_flags(&mut cfg, &cli.command);
    let name = command_name(&cli.command);
    let sink = Sink::new(
        cli.output.as_deref(),
        cfg.output.format,
        RunManifest::new(name, cli.seed, &cfg),
    )?;
    let mut ctx = Ctx {
        cfg,
        seed: cli.seed,
        sink,
    };
    match &cli.command {
        Command::Equivalence(a) => cmd_equivalence(&mut ctx, a),
        Command::Roofline(_) => cmd_roofline(&mut ctx),
        Command::Threshold => cmd_threshold(&mut ctx),
        Command::Footprint(_) => cmd_footprint(&mut ctx),
        Command::Simulate(a) => cmd_simulate(&mut ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violation(msg)) => {
            eprintln!("mla: property violation: {msg}");
            ExitCode::from(EXIT_VIOLATION)
        }
        Err(Failure::Engine(e)) => {
            eprintln!("mla: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Argument(_) => EXIT_USAGE,
                Error::Capacity(_) => EXIT_CAPACITY,
                Error::Shape(_) | Error::NotFound(_) => EXIT_FAILURE,
            })
        }
        Err(Failure::Io(e)) => {
            eprintln!("mla: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
