//! Continuous-batching decode simulator.
//!
//! A synthetic request stream is served with a fixed-size batch. Finished
//! sequences are released at step boundaries and replaced first-in
//! first-out from the pending queue. Each step can run the real engine math
//! at a reduced model size, while time is always charged from the cost
//! model at the full model size against a hardware profile.

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::costmodel::{part_time, HardwareProfile, Method};
use crate::equivalence::rel_err;
use crate::error::{arg_err, Error, Result};
use crate::hybrid::{batched_decode_on, Branch, DecodeRequest, FallbackMode, FallbackPolicy};
use crate::kvcache::{KvStore, PrefixId, SequenceHandle, DEFAULT_BLOCK_SIZE};
use crate::mla::{project_kv, project_query, LatentKv, MlaConfig, MlaWeights};
use crate::numerics::rmsnorm;

/// Distribution of a per-request token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LengthDist {
    Fixed {
        value: usize,
    },
    /// Inclusive on both ends.
    Uniform {
        lo: usize,
        hi: usize,
    },
    /// Rounded to the nearest integer and clamped to at least `min`.
    LogNormal {
        mu: f64,
        sigma: f64,
    },
}

impl LengthDist {
    pub fn fixed(value: usize) -> Self {
        Self::Fixed { value }
    }

    fn validate(&self, min: usize, what: &str) -> Result<()> {
        match *self {
            Self::Fixed { value } if value < min => arg_err(format!("{what}: fixed length below {min}")),
            Self::Uniform { lo, hi } if lo > hi || lo < min => {
                arg_err(format!("{what}: uniform bounds [{lo}, {hi}] invalid (minimum {min})"))
            }
            Self::LogNormal { mu, sigma } if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 => {
                arg_err(format!("{what}: lognormal parameters must be finite with sigma >= 0"))
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, min: usize) -> usize {
        match *self {
            Self::Fixed { value } => value,
            Self::Uniform { lo, hi } => rng.random_range(lo..=hi),
            Self::LogNormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma).expect("validated parameters");
                (d.sample(rng).round() as usize).max(min)
            }
        }
    }

    /// Closed-form mean of the underlying continuous distribution.
    pub fn mean(&self) -> f64 {
        match *self {
            Self::Fixed { value } => value as f64,
            Self::Uniform { lo, hi } => (lo + hi) as f64 / 2.0,
            Self::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub batch_size: usize,
    pub prefix_len: usize,
    /// Per-request question length appended after the shared prefix.
    pub tail_len: LengthDist,
    /// Tokens generated per request.
    pub gen_len: LengthDist,
    pub requests: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return arg_err("batch_size must be at least 1");
        }
        self.tail_len.validate(0, "tail_len")?;
        self.gen_len.validate(1, "gen_len")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Request {
    pub id: usize,
    pub tail_len: usize,
    pub gen_len: usize,
}

/// Reproducible request stream for a workload.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.requests)
        .map(|id| Request {
            id,
            tail_len: spec.tail_len.sample(&mut rng, 0),
            gen_len: spec.gen_len.sample(&mut rng, 1),
        })
        .collect())
}

/// Everything besides the workload that a simulation needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    /// Shape used for the real math.
    pub engine: MlaConfig,
    /// Shape used for modeled time.
    pub cost: MlaConfig,
    pub hardware: HardwareProfile,
    pub policy: FallbackPolicy,
    pub block_size: usize,
    /// Page pool size; `None` sizes the pool to fit the whole batch.
    pub num_pages: Option<usize>,
    /// Run the attention math, not only the cost model.
    pub execute: bool,
    /// When executing, also run the other branch and record the deviation.
    pub parity_check: bool,
    pub weight_seed: u64,
}

impl SimConfig {
    /// Scaled-down real math, full-size preset for the cost model, and the
    /// fallback threshold derived from the hardware.
    pub fn new(cost: MlaConfig, hardware: HardwareProfile) -> Self {
        Self {
            engine: MlaConfig::tiny(4, 16),
            policy: FallbackPolicy::for_hardware(&cost, &hardware),
            cost,
            hardware,
            block_size: DEFAULT_BLOCK_SIZE,
            num_pages: None,
            execute: false,
            parity_check: false,
            weight_seed: 0,
        }
    }
}

/// Modeled seconds per decode component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ComponentTimes {
    pub stage1_attn: f64,
    pub stage2_attn: f64,
    pub wkvb1_proj: f64,
    pub wkvb2_proj: f64,
    pub combine_lse: f64,
}

impl ComponentTimes {
    pub fn total(&self) -> f64 {
        self.stage1_attn + self.stage2_attn + self.wkvb1_proj + self.wkvb2_proj + self.combine_lse
    }

    fn add(&mut self, o: &ComponentTimes) {
        self.stage1_attn += o.stage1_attn;
        self.stage2_attn += o.stage2_attn;
        self.wkvb1_proj += o.wkvb1_proj;
        self.wkvb2_proj += o.wkvb2_proj;
        self.combine_lse += o.combine_lse;
    }
}

/// Modeled cost of one decode step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepModel {
    pub branch: Branch,
    pub components: ComponentTimes,
    /// Attention time over the shared prefix.
    pub shared_attn: f64,
    /// Attention time over the non-shared tails.
    pub nonshared_attn: f64,
}

/// Charge one decode step of `batch` single-token queries, a shared prefix
/// of `l_s` tokens and `tail_tokens` non-shared tokens summed over the batch.
pub fn model_step(
    branch: Branch,
    batch: usize,
    l_s: usize,
    tail_tokens: usize,
    cfg: &MlaConfig,
    hw: &HardwareProfile,
) -> StepModel {
    let db = hw.dtype_bytes;
    let b = batch as f64;
    let ls = l_s as f64;
    let tails = tail_tokens as f64;
    let expanded = cfg.expanded_dim() as f64;
    let absorb = cfg.absorb_macs_per_token() as f64;
    let latent = cfg.latent_dim() as f64;
    let heads = cfg.num_heads as f64;
    let dl = cfg.kv_lora_rank as f64;

    let naive_shared = part_time(2.0 * b * ls * expanded, ls * expanded * db, hw);
    let naive_tail = part_time(2.0 * tails * expanded, tails * expanded * db, hw);
    let absorb_shared = part_time(2.0 * b * ls * absorb, ls * latent * db, hw);
    let absorb_tail = part_time(2.0 * tails * absorb, tails * latent * db, hw);

    // Query absorption / output lift for absorb; the equal-sized K/V
    // up-projection of the new token for naive.
    let kb = heads * dl * cfg.nope_head_dim as f64;
    let vb = heads * dl * cfg.v_head_dim as f64;
    let wkvb1_proj = part_time(2.0 * b * kb, kb * db, hw);
    let wkvb2_proj = part_time(2.0 * b * vb, vb * db, hw);

    let mut c = ComponentTimes {
        wkvb1_proj,
        wkvb2_proj,
        ..Default::default()
    };
    let (shared_attn, nonshared_attn) = match branch {
        Branch::Hybrid => {
            c.stage1_attn = naive_shared;
            c.stage2_attn = absorb_tail;
            if l_s > 0 && tail_tokens > 0 {
                c.combine_lse = 2.0 * b * heads * (cfg.v_head_dim as f64 + 1.0) * db / hw.hbm_bandwidth;
            }
            (naive_shared, absorb_tail)
        }
        Branch::Absorb => {
            c.stage2_attn = absorb_shared + absorb_tail;
            (absorb_shared, absorb_tail)
        }
        Branch::Naive => {
            c.stage1_attn = naive_shared + naive_tail;
            (naive_shared, naive_tail)
        }
    };
    StepModel {
        branch,
        components: c,
        shared_attn,
        nonshared_attn,
    }
}

/// Branch a method runs for a given step.
///
/// For the hybrid method in auto mode the batch-size threshold decides; a
/// batch above the threshold still falls back when the modeled hybrid step
/// would be slower than absorb-only (very short prefixes just above the
/// threshold, where the merge cost outweighs the shared-part saving).
pub fn resolve_branch(
    method: Method,
    policy: &FallbackPolicy,
    batch: usize,
    l_s: usize,
    tail_tokens: usize,
    cfg: &MlaConfig,
    hw: &HardwareProfile,
) -> Branch {
    match method {
        Method::Naive => Branch::Naive,
        Method::Absorb => Branch::Absorb,
        Method::Typhoon => match policy.resolve(batch) {
            Branch::Hybrid if policy.mode == FallbackMode::Auto => {
                let hybrid = model_step(Branch::Hybrid, batch, l_s, tail_tokens, cfg, hw);
                let absorb = model_step(Branch::Absorb, batch, l_s, tail_tokens, cfg, hw);
                if hybrid.components.total() > absorb.components.total() {
                    Branch::Absorb
                } else {
                    Branch::Hybrid
                }
            }
            other => other,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub batch: usize,
    pub branch: Branch,
    pub tail_tokens: usize,
    pub stage1_attn_s: f64,
    pub stage2_attn_s: f64,
    pub wkvb1_proj_s: f64,
    pub wkvb2_proj_s: f64,
    pub combine_lse_s: f64,
    pub step_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub method: Method,
    pub workload: WorkloadSpec,
    pub engine_config: MlaConfig,
    pub cost_config: MlaConfig,
    pub hardware: HardwareProfile,
    pub threshold_batch: usize,
    pub executed: bool,
    pub requests_completed: usize,
    pub total_tokens: usize,
    pub steps: usize,
    pub hybrid_steps: usize,
    pub modeled: ComponentTimes,
    pub shared_attn_s: f64,
    pub nonshared_attn_s: f64,
    pub modeled_time_s: f64,
    pub throughput_tokens_per_s: f64,
    /// Desk-scale wall time; informational only.
    pub wall_time_s: f64,
    pub max_parity_rel_err: Option<f64>,
    pub peak_pages_used: usize,
    pub traces: Vec<StepTrace>,
}

struct Active {
    handle: SequenceHandle,
    remaining: usize,
    position: usize,
    hidden: Vec<f32>,
}

fn random_hidden(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Serve the whole workload with continuous batching.
pub fn run_simulation(spec: &WorkloadSpec, method: Method, sim: &SimConfig) -> Result<SimReport> {
    spec.validate()?;
    sim.engine.validate()?;
    sim.cost.validate()?;
    sim.hardware.validate()?;
    let started = Instant::now();
    let requests = generate_workload(spec)?;
    let mut pending: VecDeque<Request> = requests.iter().copied().collect();

    let per_seq_pages = requests
        .iter()
        .map(|r| (r.tail_len + r.gen_len).div_ceil(sim.block_size))
        .max()
        .unwrap_or(0);
    let num_pages = sim
        .num_pages
        .unwrap_or(per_seq_pages * spec.batch_size.min(requests.len()));

    // Model-only runs keep real page accounting with zero-width latents.
    let store_cfg = if sim.execute {
        sim.engine.clone()
    } else {
        MlaConfig {
            kv_lora_rank: 0,
            rope_dim: 0,
            ..sim.engine.clone()
        }
    };
    let mut store = KvStore::<f32>::new(&store_cfg, sim.block_size, num_pages)?;
    let weights = if sim.execute {
        Some(MlaWeights::<f32>::random(&sim.engine, sim.weight_seed)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);

    let prefix = if spec.prefix_len > 0 {
        if let Some(w) = &weights {
            let latents = (0..spec.prefix_len)
                .map(|pos| project_kv(&random_hidden(&mut rng, w.config.model_dim), w, pos))
                .collect::<Result<Vec<_>>>()?;
            store.seal_prefix(PrefixId(0), latents, w)?;
            Some(PrefixId(0))
        } else {
            None
        }
    } else {
        None
    };

    let mut report = SimReport {
        method,
        workload: spec.clone(),
        engine_config: sim.engine.clone(),
        cost_config: sim.cost.clone(),
        hardware: sim.hardware.clone(),
        threshold_batch: sim.policy.threshold_batch,
        executed: sim.execute,
        requests_completed: 0,
        total_tokens: 0,
        steps: 0,
        hybrid_steps: 0,
        modeled: ComponentTimes::default(),
        shared_attn_s: 0.0,
        nonshared_attn_s: 0.0,
        modeled_time_s: 0.0,
        throughput_tokens_per_s: 0.0,
        wall_time_s: 0.0,
        max_parity_rel_err: None,
        peak_pages_used: 0,
        traces: Vec::new(),
    };

    let mut active: Vec<Active> = Vec::with_capacity(spec.batch_size);
    let backpressure = |store: &KvStore<f32>, step: usize, active: usize, pending: usize, e: Error| match e {
        Error::Capacity(msg) => Error::Capacity(format!(
            "{msg}; step {step}, {active} active, {pending} pending, {}/{} pages free",
            store.paged().free_pages(),
            store.paged().total_pages()
        )),
        other => other,
    };

    loop {
        // admission
        while active.len() < spec.batch_size {
            let Some(req) = pending.pop_front() else { break };
            let mut handle = store.register(prefix)?;
            let mut req_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1 + req.id as u64));
            for j in 0..req.tail_len {
                let latent = match &weights {
                    Some(w) => project_kv(&random_hidden(&mut req_rng, w.config.model_dim), w, spec.prefix_len + j)?,
                    None => LatentKv {
                        nope: Vec::new(),
                        pe: Vec::new(),
                    },
                };
                handle = store
                    .append_token(&handle, latent)
                    .map_err(|e| backpressure(&store, report.steps, active.len(), pending.len(), e))?;
            }
            let hidden = match &weights {
                Some(w) => random_hidden(&mut req_rng, w.config.model_dim),
                None => Vec::new(),
            };
            active.push(Active {
                handle,
                remaining: req.gen_len,
                position: spec.prefix_len + req.tail_len,
                hidden,
            });
        }
        if active.is_empty() {
            break;
        }

        // append this step's token to every active sequence
        let mut queries = Vec::with_capacity(active.len());
        let n_active = active.len();
        for a in active.iter_mut() {
            let latent = match &weights {
                Some(w) => {
                    queries.push(DecodeRequest {
                        seq: a.handle.seq,
                        query: project_query(&a.hidden, w, a.position)?,
                    });
                    project_kv(&a.hidden, w, a.position)?
                }
                None => LatentKv {
                    nope: Vec::new(),
                    pe: Vec::new(),
                },
            };
            a.handle = store
                .append_token(&a.handle, latent)
                .map_err(|e| backpressure(&store, report.steps, n_active, pending.len(), e))?;
        }
        report.peak_pages_used = report.peak_pages_used.max(store.paged().used_pages());

        let batch = active.len();
        let tail_tokens: usize = active.iter().map(|a| a.handle.len).sum();
        let branch = resolve_branch(
            method,
            &sim.policy,
            batch,
            spec.prefix_len,
            tail_tokens,
            &sim.cost,
            &sim.hardware,
        );

        if let Some(w) = &weights {
            let out = batched_decode_on(&queries, &store, w, branch)?;
            if sim.parity_check {
                let other = if branch == Branch::Absorb {
                    Branch::Hybrid
                } else {
                    Branch::Absorb
                };
                let alt = batched_decode_on(&queries, &store, w, other)?;
                let err = out
                    .outputs
                    .iter()
                    .zip(&alt.outputs)
                    .map(|(a, b)| rel_err(a, b))
                    .fold(report.max_parity_rel_err.unwrap_or(0.0), f64::max);
                report.max_parity_rel_err = Some(err);
            }
            let ones = vec![1.0f32; w.config.model_dim];
            for (a, o) in active.iter_mut().zip(&out.outputs) {
                a.hidden = rmsnorm(o, &ones, w.config.norm_eps as f32)?;
            }
        }

        let m = model_step(branch, batch, spec.prefix_len, tail_tokens, &sim.cost, &sim.hardware);
        let step_time = m.components.total();
        report.modeled.add(&m.components);
        report.shared_attn_s += m.shared_attn;
        report.nonshared_attn_s += m.nonshared_attn;
        report.modeled_time_s += step_time;
        if branch == Branch::Hybrid {
            report.hybrid_steps += 1;
        }
        report.traces.push(StepTrace {
            step: report.steps,
            batch,
            branch,
            tail_tokens,
            stage1_attn_s: m.components.stage1_attn,
            stage2_attn_s: m.components.stage2_attn,
            wkvb1_proj_s: m.components.wkvb1_proj,
            wkvb2_proj_s: m.components.wkvb2_proj,
            combine_lse_s: m.components.combine_lse,
            step_time_s: step_time,
        });
        report.steps += 1;
        report.total_tokens += batch;

        // retire finished sequences
        let mut i = 0;
        while i < active.len() {
            let a = &mut active[i];
            a.remaining -= 1;
            a.position += 1;
            if a.remaining == 0 {
                let done = active.swap_remove(i);
                store.release_sequence(&done.handle)?;
                report.requests_completed += 1;
            } else {
                i += 1;
            }
        }
        // keep FIFO order among survivors deterministic
        active.sort_by_key(|a| a.handle.seq);
    }

    report.throughput_tokens_per_s = if report.modeled_time_s > 0.0 {
        report.total_tokens as f64 / report.modeled_time_s
    } else {
        0.0
    };
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub batch: usize,
    pub naive_tokens_per_s: f64,
    pub absorb_tokens_per_s: f64,
    pub typhoon_tokens_per_s: f64,
    pub speedup_vs_absorb: f64,
    pub speedup_vs_best: f64,
    pub hybrid_steps: usize,
    pub steps: usize,
}

/// Modeled throughput of every method across batch sizes. Each point runs
/// `batch × max(1, requests / batch_size)` requests from the same stream
/// parameters.
pub fn speedup_report(spec: &WorkloadSpec, sim: &SimConfig, batches: &[usize]) -> Result<Vec<SpeedupRow>> {
    if batches.is_empty() {
        return arg_err("speedup report needs at least one batch size");
    }
    let rounds = (spec.requests / spec.batch_size.max(1)).max(1);
    let model_only = SimConfig {
        execute: false,
        parity_check: false,
        ..sim.clone()
    };
    batches
        .iter()
        .map(|&batch| {
            let point = WorkloadSpec {
                batch_size: batch,
                requests: batch * rounds,
                ..spec.clone()
            };
            let naive = run_simulation(&point, Method::Naive, &model_only)?;
            let absorb = run_simulation(&point, Method::Absorb, &model_only)?;
            let typhoon = run_simulation(&point, Method::Typhoon, &model_only)?;
            let best = naive.throughput_tokens_per_s.max(absorb.throughput_tokens_per_s);
            Ok(SpeedupRow {
                batch,
                naive_tokens_per_s: naive.throughput_tokens_per_s,
                absorb_tokens_per_s: absorb.throughput_tokens_per_s,
                typhoon_tokens_per_s: typhoon.throughput_tokens_per_s,
                speedup_vs_absorb: typhoon.throughput_tokens_per_s / absorb.throughput_tokens_per_s,
                speedup_vs_best: typhoon.throughput_tokens_per_s / best,
                hybrid_steps: typhoon.hybrid_steps,
                steps: typhoon.steps,
            })
        })
        .collect()
}
