//! Hybrid decode: naive attention over the expanded shared prefix, absorb
//! attention over each sequence's compressed tail, and an exact merge of the
//! two partial results through their log-sum-exp values.
//!
//! Small batches fall back to absorb-only execution over the whole context
//! (the prefix's retained latents followed by the tail). Both branches give
//! the same numbers; only the cost accounting differs.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{crossover_batch, HardwareProfile};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::kvcache::{KvStore, PrefixId, SeqId, SequenceHandle, SharedPrefixCache};
use crate::mla::{
    attend_absorb, attend_naive, expand_kv, output_projection, project_kv, project_query, LatentKv, MlaWeights,
    QueryState,
};
use crate::numerics::Scalar;

/// Per-head attention output over one slice of the context, together with
/// the log-sum-exp of that slice's scores. An empty slice has `lse = -inf`
/// and zero output, which makes it the identity of [`combine_lse`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPartial<T> {
    pub output: Vec<Vec<T>>,
    pub lse: Vec<T>,
}

impl<T: Scalar> AttentionPartial<T> {
    pub fn new(output: Vec<Vec<T>>, lse: Vec<T>) -> Self {
        debug_assert_eq!(output.len(), lse.len());
        Self { output, lse }
    }

    pub fn empty(num_heads: usize, v_head_dim: usize) -> Self {
        Self {
            output: vec![vec![T::zero(); v_head_dim]; num_heads],
            lse: vec![T::neg_infinity(); num_heads],
        }
    }

    pub fn num_heads(&self) -> usize {
        self.lse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lse.iter().all(|l| *l == T::neg_infinity())
    }
}

/// Merge two partials computed over disjoint parts of the same context.
pub fn combine_lse<T: Scalar>(a: &AttentionPartial<T>, b: &AttentionPartial<T>) -> Result<AttentionPartial<T>> {
    if a.num_heads() != b.num_heads() {
        return shape_err(format!(
            "combine_lse: {} heads vs {} heads",
            a.num_heads(),
            b.num_heads()
        ));
    }
    let mut output = Vec::with_capacity(a.num_heads());
    let mut lse = Vec::with_capacity(a.num_heads());
    for h in 0..a.num_heads() {
        let (la, lb) = (a.lse[h], b.lse[h]);
        let (oa, ob) = (&a.output[h], &b.output[h]);
        if oa.len() != ob.len() {
            return shape_err("combine_lse: value head dims differ");
        }
        let m = la.max(lb);
        if m == T::neg_infinity() {
            output.push(vec![T::zero(); oa.len()]);
            lse.push(T::neg_infinity());
            continue;
        }
        let wa = (la - m).exp();
        let wb = (lb - m).exp();
        let z = wa + wb;
        output.push(oa.iter().zip(ob).map(|(&x, &y)| (wa * x + wb * y) / z).collect());
        lse.push(m + z.ln());
    }
    Ok(AttentionPartial { output, lse })
}

/// One decode query against a shared prefix and a compressed tail.
pub fn typhoon_decode_step<'a, T, I>(
    q: &QueryState<T>,
    shared: Option<&SharedPrefixCache<T>>,
    tail: I,
    w: &MlaWeights<T>,
    scale: T,
) -> Result<AttentionPartial<T>>
where
    T: Scalar,
    I: IntoIterator<Item = &'a LatentKv<T>>,
{
    typhoon_decode_step_masked(q, shared, tail, w, scale, None)
}

/// Like [`typhoon_decode_step`] with a causal boundary inside the tail:
/// only the first `tail_visible` tail tokens are attended.
pub fn typhoon_decode_step_masked<'a, T, I>(
    q: &QueryState<T>,
    shared: Option<&SharedPrefixCache<T>>,
    tail: I,
    w: &MlaWeights<T>,
    scale: T,
    tail_visible: Option<usize>,
) -> Result<AttentionPartial<T>>
where
    T: Scalar,
    I: IntoIterator<Item = &'a LatentKv<T>>,
{
    let tail: Vec<&LatentKv<T>> = tail.into_iter().collect();
    let visible = tail_visible.unwrap_or(tail.len()).min(tail.len());
    let shared = shared.filter(|s| !s.is_empty());
    let cfg = &w.config;

    let stage1 = match shared {
        Some(s) => attend_naive(q, s.tokens(), scale, None)?,
        None => AttentionPartial::empty(cfg.num_heads, cfg.v_head_dim),
    };
    let stage2 = if visible > 0 {
        attend_absorb(q, tail[..visible].iter().copied(), w, scale, None)?
    } else {
        AttentionPartial::empty(cfg.num_heads, cfg.v_head_dim)
    };
    if shared.is_none() && visible == 0 {
        return arg_err("decode step with neither a shared prefix nor a tail");
    }
    combine_lse(&stage1, &stage2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackMode {
    Auto,
    ForceHybrid,
    ForceAbsorb,
}

impl std::str::FromStr for FallbackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "force-hybrid" => Ok(Self::ForceHybrid),
            "force-absorb" => Ok(Self::ForceAbsorb),
            other => Err(Error::Config(format!("unknown fallback mode '{other}'"))),
        }
    }
}

/// Which kernel path a batch takes. The fallback policy only ever picks
/// `Hybrid` or `Absorb`; `Naive` is the expanded-cache baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Hybrid,
    Absorb,
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackPolicy {
    pub threshold_batch: usize,
    pub mode: FallbackMode,
}

impl Default for FallbackPolicy {
    fn default() -> Self {
        Self {
            threshold_batch: 64,
            mode: FallbackMode::Auto,
        }
    }
}

impl FallbackPolicy {
    pub fn new(threshold_batch: usize, mode: FallbackMode) -> Result<Self> {
        if threshold_batch == 0 {
            return arg_err("fallback threshold must be at least 1");
        }
        Ok(Self { threshold_batch, mode })
    }

    /// Auto policy with the threshold taken from the cost model's rounded
    /// crossover batch for this hardware.
    pub fn for_hardware(cfg: &crate::mla::MlaConfig, hw: &HardwareProfile) -> Self {
        Self {
            threshold_batch: crossover_batch(cfg, hw).rounded as usize,
            mode: FallbackMode::Auto,
        }
    }

    pub fn resolve(&self, batch: usize) -> Branch {
        match self.mode {
            FallbackMode::ForceHybrid => Branch::Hybrid,
            FallbackMode::ForceAbsorb => Branch::Absorb,
            FallbackMode::Auto if batch < self.threshold_batch => Branch::Absorb,
            FallbackMode::Auto => Branch::Hybrid,
        }
    }
}

/// Work performed by one decode step, in MACs and elements read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepCost {
    pub branch: Branch,
    pub batch: usize,
    pub stage1_macs: u128,
    pub stage1_elems: u128,
    pub stage2_macs: u128,
    pub stage2_elems: u128,
    pub combine_elems: u128,
}

pub struct DecodeRequest<T> {
    pub seq: SeqId,
    pub query: QueryState<T>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput<T> {
    /// One `model_dim` vector per request, after the output projection.
    pub outputs: Vec<Vec<T>>,
    pub partials: Vec<AttentionPartial<T>>,
    pub cost: StepCost,
}

/// Decode a batch of queries, each against its own prefix and tail, on
/// the branch the policy picks for this batch size.
pub fn batched_decode<T: Scalar>(
    requests: &[DecodeRequest<T>],
    store: &KvStore<T>,
    w: &MlaWeights<T>,
    policy: &FallbackPolicy,
) -> Result<DecodeOutput<T>> {
    batched_decode_on(requests, store, w, policy.resolve(requests.len()))
}

/// Decode a batch on an explicitly chosen branch.
pub fn batched_decode_on<T: Scalar>(
    requests: &[DecodeRequest<T>],
    store: &KvStore<T>,
    w: &MlaWeights<T>,
    branch: Branch,
) -> Result<DecodeOutput<T>> {
    let cfg = &w.config;
    let scale = T::from_f64_lossy(cfg.softmax_scale());

    let handles = requests
        .iter()
        .map(|r| store.paged().handle(r.seq))
        .collect::<Result<Vec<SequenceHandle>>>()?;
    let prefixes = handles
        .iter()
        .map(|h| h.prefix.map(|id| store.prefix(id).map(|p| p.as_ref())).transpose())
        .collect::<Result<Vec<_>>>()?;

    let partials = requests
        .par_iter()
        .zip(handles.par_iter())
        .zip(prefixes.par_iter())
        .map(|((req, handle), prefix)| {
            let tail = store.paged().iter_sequence(handle.seq)?;
            match branch {
                Branch::Hybrid => typhoon_decode_step(&req.query, *prefix, tail, w, scale),
                Branch::Absorb => {
                    let shared = prefix.map(|p| p.latents()).unwrap_or(&[]);
                    attend_absorb(&req.query, shared.iter().chain(tail), w, scale, None)
                }
                Branch::Naive => {
                    let expanded = tail.map(|l| expand_kv(l, w)).collect::<Result<Vec<_>>>()?;
                    let shared = prefix.map(|p| p.tokens()).unwrap_or(&[]);
                    attend_naive(&req.query, shared.iter().chain(&expanded), scale, None)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let outputs = partials
        .par_iter()
        .map(|p| output_projection(&p.output, &w.w_o))
        .collect::<Result<Vec<_>>>()?;

    let cost = step_cost(branch, &handles, &prefixes, cfg);
    Ok(DecodeOutput {
        outputs,
        partials,
        cost,
    })
}

fn step_cost<T: Scalar>(
    branch: Branch,
    handles: &[SequenceHandle],
    prefixes: &[Option<&SharedPrefixCache<T>>],
    cfg: &crate::mla::MlaConfig,
) -> StepCost {
    let expanded = cfg.expanded_dim() as u128;
    let absorb = cfg.absorb_macs_per_token() as u128;
    let latent = cfg.latent_dim() as u128;
    let mut distinct: BTreeSet<PrefixId> = BTreeSet::new();
    let mut cost = StepCost {
        branch,
        batch: handles.len(),
        stage1_macs: 0,
        stage1_elems: 0,
        stage2_macs: 0,
        stage2_elems: 0,
        combine_elems: 0,
    };
    for (h, p) in handles.iter().zip(prefixes) {
        let ls = p.map_or(0, |p| p.len()) as u128;
        let ln = h.len as u128;
        let first_reader = p.is_some_and(|p| distinct.insert(p.id()));
        match branch {
            Branch::Hybrid => {
                cost.stage1_macs += ls * expanded;
                cost.stage2_macs += ln * absorb;
                cost.stage2_elems += ln * latent;
                if first_reader {
                    cost.stage1_elems += ls * expanded;
                }
                if ls > 0 && ln > 0 {
                    cost.combine_elems += 2 * cfg.num_heads as u128 * (cfg.v_head_dim as u128 + 1);
                }
            }
            Branch::Naive => {
                cost.stage1_macs += (ls + ln) * expanded;
                cost.stage1_elems += ln * expanded;
                if first_reader {
                    cost.stage1_elems += ls * expanded;
                }
            }
            Branch::Absorb => {
                cost.stage2_macs += (ls + ln) * absorb;
                cost.stage2_elems += ln * latent;
                if first_reader {
                    cost.stage2_elems += ls * latent;
                }
            }
        }
    }
    cost
}

/// Result of prefilling a batch that shares one prefix.
#[derive(Debug, Clone)]
pub struct PrefillOutput<T> {
    pub prefix: Option<PrefixId>,
    pub handles: Vec<SequenceHandle>,
    /// Query state of each request's last token, ready for decoding.
    pub last_queries: Vec<QueryState<T>>,
    /// Causal attention output (after `W_O`) for every tail token.
    pub tail_outputs: Vec<Vec<Vec<T>>>,
}

/// Prefill a batch whose first `prefix_len` tokens are declared identical.
///
/// The prefix is projected and expanded once; each request's remaining
/// tokens are projected into compressed pages and attended causally.
pub fn prefill<T: Scalar>(
    batch: &[Vec<Vec<T>>],
    prefix_len: usize,
    prefix_id: PrefixId,
    w: &MlaWeights<T>,
    store: &mut KvStore<T>,
) -> Result<PrefillOutput<T>> {
    if batch.is_empty() {
        return arg_err("prefill batch is empty");
    }
    for (i, req) in batch.iter().enumerate() {
        if req.len() < prefix_len || req.is_empty() {
            return arg_err(format!(
                "request {i} has {} tokens, shorter than the declared prefix of {prefix_len}",
                req.len()
            ));
        }
        if req[..prefix_len] != batch[0][..prefix_len] {
            return arg_err(format!("request {i} does not share the declared prefix"));
        }
    }

    let prefix = if prefix_len > 0 {
        let latents = batch[0][..prefix_len]
            .iter()
            .enumerate()
            .map(|(pos, h)| project_kv(h, w, pos))
            .collect::<Result<Vec<_>>>()?;
        if store.has_prefix(prefix_id) {
            if store.prefix(prefix_id)?.latents() != latents.as_slice() {
                return arg_err(format!("prefix {} is sealed with different tokens", prefix_id.0));
            }
        } else {
            store.seal_prefix(prefix_id, latents, w)?;
        }
        Some(prefix_id)
    } else {
        None
    };

    let mut out = PrefillOutput {
        prefix,
        handles: Vec::with_capacity(batch.len()),
        last_queries: Vec::with_capacity(batch.len()),
        tail_outputs: Vec::with_capacity(batch.len()),
    };
    for req in batch {
        let (handle, outputs) = prefill_tail(prefix, prefix_len, &req[prefix_len..], w, store, true)?;
        let last = req.len() - 1;
        out.last_queries.push(project_query(&req[last], w, last)?);
        out.handles.push(handle);
        out.tail_outputs.push(outputs);
    }
    Ok(out)
}

/// Register a sequence on `prefix` and append its tail tokens, starting at
/// position `prefix_len`. With `compute_outputs` the causal attention output
/// of every tail token is returned as well.
pub fn prefill_tail<T: Scalar>(
    prefix: Option<PrefixId>,
    prefix_len: usize,
    tail: &[Vec<T>],
    w: &MlaWeights<T>,
    store: &mut KvStore<T>,
    compute_outputs: bool,
) -> Result<(SequenceHandle, Vec<Vec<T>>)> {
    let mut handle = store.register(prefix)?;
    for (j, h) in tail.iter().enumerate() {
        let latent = project_kv(h, w, prefix_len + j)?;
        handle = match store.append_token(&handle, latent) {
            Ok(h) => h,
            Err(e) => {
                store.release_sequence(&handle)?;
                return Err(e);
            }
        };
    }
    let mut outputs = Vec::new();
    if compute_outputs && !tail.is_empty() {
        let scale = T::from_f64_lossy(w.config.softmax_scale());
        let shared = prefix.map(|id| store.prefix(id)).transpose()?.map(|p| p.as_ref());
        let latents = store.paged().gather_sequence(&handle)?;
        for (j, h) in tail.iter().enumerate() {
            let q = project_query(h, w, prefix_len + j)?;
            let p = typhoon_decode_step_masked(&q, shared, &latents, w, scale, Some(j + 1))?;
            outputs.push(output_projection(&p.output, &w.w_o)?);
        }
    }
    Ok((handle, outputs))
}
