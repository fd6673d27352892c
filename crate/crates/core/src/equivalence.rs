//! Randomised cross-checks between the three formulations.
//!
//! Each trial draws a small model shape, random weights and a random
//! context split into a shared prefix and a tail, then compares naive
//! attention over the fully expanded context, absorb attention over the
//! fully compressed context, and the hybrid decode step.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{arg_err, Result};
use crate::hybrid::{combine_lse, typhoon_decode_step, AttentionPartial};
use crate::kvcache::{seal_shared_prefix, PrefixId};
use crate::mla::{
    attend_absorb, attend_naive, expand_kv, output_projection, project_kv, project_query, LatentKv, MlaConfig,
    MlaWeights,
};
use crate::numerics::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceSettings {
    pub trials: usize,
    pub seed: u64,
    pub heads: Vec<usize>,
    pub kv_lora_ranks: Vec<usize>,
    pub max_shared: usize,
    pub max_tail: usize,
    pub tolerance: f64,
    /// Run the absorb path on a copy of the weights with one perturbed entry.
    pub inject_fault: bool,
}

impl EquivalenceSettings {
    pub fn new(trials: usize, seed: u64, tolerance: f64) -> Self {
        Self {
            trials,
            seed,
            heads: vec![1, 2, 4, 8],
            kv_lora_ranks: vec![8, 16, 32],
            max_shared: 32,
            max_tail: 32,
            tolerance,
            inject_fault: false,
        }
    }

    /// 1e-10 for 64-bit, 1e-5 for 32-bit.
    pub fn default_tolerance<T: Scalar>() -> f64 {
        if std::mem::size_of::<T>() >= 8 {
            1e-10
        } else {
            1e-5
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub precision: &'static str,
    pub trials: usize,
    pub tolerance: f64,
    pub max_rel_naive_absorb: f64,
    pub max_rel_naive_typhoon: f64,
    pub max_rel_absorb_typhoon: f64,
    pub max_lse_diff: f64,
    pub violations: usize,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn max_rel(&self) -> f64 {
        self.max_rel_naive_absorb
            .max(self.max_rel_naive_typhoon)
            .max(self.max_rel_absorb_typhoon)
    }
}

pub(crate) fn precision_name<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() >= 8 {
        "f64"
    } else {
        "f32"
    }
}

/// `max|a-b| / max|b|` over all elements.
pub fn rel_err<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let scale = b.iter().fold(0.0f64, |s, v| s.max(v.as_f64().abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |d, (x, y)| d.max((x.as_f64() - y.as_f64()).abs()));
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn lse_diff<T: Scalar>(a: &AttentionPartial<T>, b: &AttentionPartial<T>) -> f64 {
    a.lse
        .iter()
        .zip(&b.lse)
        .map(|(x, y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / y.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

fn random_shape(rng: &mut ChaCha8Rng, settings: &EquivalenceSettings) -> MlaConfig {
    MlaConfig {
        model_dim: *[16, 32].choose(rng).unwrap(),
        num_heads: *settings.heads.choose(rng).unwrap(),
        nope_head_dim: *[4, 8, 16].choose(rng).unwrap(),
        rope_dim: *[2, 4, 8].choose(rng).unwrap(),
        v_head_dim: *[4, 8, 16].choose(rng).unwrap(),
        kv_lora_rank: *settings.kv_lora_ranks.choose(rng).unwrap(),
        q_lora_rank: *[8, 16].choose(rng).unwrap(),
        rope_base: 10000.0,
        norm_eps: 1e-6,
    }
}

fn random_hidden<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| T::from_f64_lossy(rng.random_range(-1.0..1.0))).collect()
}

fn random_context<T: Scalar>(rng: &mut ChaCha8Rng, w: &MlaWeights<T>, len: usize) -> Result<Vec<LatentKv<T>>> {
    (0..len)
        .map(|pos| project_kv(&random_hidden(rng, w.config.model_dim), w, pos))
        .collect()
}

/// Exactness suite over random shapes and prefix/tail splits.
pub fn run_equivalence<T: Scalar>(settings: &EquivalenceSettings) -> Result<EquivalenceReport> {
    if settings.trials == 0 {
        return arg_err("equivalence needs at least one trial");
    }
    if settings.heads.is_empty() || settings.kv_lora_ranks.is_empty() {
        return arg_err("equivalence needs non-empty head and rank choices");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut report = EquivalenceReport {
        precision: precision_name::<T>(),
        trials: settings.trials,
        tolerance: settings.tolerance,
        max_rel_naive_absorb: 0.0,
        max_rel_naive_typhoon: 0.0,
        max_rel_absorb_typhoon: 0.0,
        max_lse_diff: 0.0,
        violations: 0,
    };
    for _ in 0..settings.trials {
        let cfg = random_shape(&mut rng, settings);
        let w = MlaWeights::<T>::random(&cfg, rng.random())?;
        let (l_s, l_n) = loop {
            let l_s = rng.random_range(0..=settings.max_shared);
            let l_n = rng.random_range(0..=settings.max_tail);
            if l_s + l_n >= 1 {
                break (l_s, l_n);
            }
        };
        let context = random_context(&mut rng, &w, l_s + l_n)?;
        let q = project_query(&random_hidden(&mut rng, cfg.model_dim), &w, l_s + l_n)?;
        let scale = T::from_f64_lossy(cfg.softmax_scale());

        let expanded = context.iter().map(|l| expand_kv(l, &w)).collect::<Result<Vec<_>>>()?;
        let naive = attend_naive(&q, &expanded, scale, None)?;

        let absorb_weights = if settings.inject_fault {
            let mut faulty = w.clone();
            let m = &mut faulty.w_kb[0];
            m.data_mut()[0] = m.data()[0] + T::from_f64_lossy(0.5);
            faulty
        } else {
            w.clone()
        };
        let absorb = attend_absorb(&q, &context, &absorb_weights, scale, None)?;

        let shared = if l_s > 0 {
            Some(seal_shared_prefix(PrefixId(0), context[..l_s].to_vec(), &w)?)
        } else {
            None
        };
        let typhoon = typhoon_decode_step(&q, shared.as_ref(), &context[l_s..], &w, scale)?;

        let out_n = output_projection(&naive.output, &w.w_o)?;
        let out_a = output_projection(&absorb.output, &w.w_o)?;
        let out_t = output_projection(&typhoon.output, &w.w_o)?;
        let na = rel_err(&out_a, &out_n);
        let nt = rel_err(&out_t, &out_n);
        let at = rel_err(&out_t, &out_a);
        let ld = lse_diff(&absorb, &naive).max(lse_diff(&typhoon, &naive));
        report.max_rel_naive_absorb = report.max_rel_naive_absorb.max(na);
        report.max_rel_naive_typhoon = report.max_rel_naive_typhoon.max(nt);
        report.max_rel_absorb_typhoon = report.max_rel_absorb_typhoon.max(at);
        report.max_lse_diff = report.max_lse_diff.max(ld);
        let tol = settings.tolerance;
        if !(na <= tol && nt <= tol && at <= tol && ld <= tol) {
            report.violations += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub trials: usize,
    pub max_rel_err: f64,
    pub violations: usize,
}

/// Cut a random context at a random point, attend to each side separately
/// (absorb on the left, naive on the right), merge, and compare with the
/// uncut attention.
pub fn run_split_invariance<T: Scalar>(trials: usize, seed: u64, tolerance: f64) -> Result<SplitReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = EquivalenceSettings::new(trials, seed, tolerance);
    let mut report = SplitReport {
        trials,
        max_rel_err: 0.0,
        violations: 0,
    };
    for _ in 0..trials {
        let cfg = random_shape(&mut rng, &settings);
        let w = MlaWeights::<T>::random(&cfg, rng.random())?;
        let len = rng.random_range(1..=64usize);
        let cut = rng.random_range(0..=len);
        let context = random_context(&mut rng, &w, len)?;
        let q = project_query(&random_hidden(&mut rng, cfg.model_dim), &w, len)?;
        let scale = T::from_f64_lossy(cfg.softmax_scale());

        let left = if cut > 0 {
            attend_absorb(&q, &context[..cut], &w, scale, None)?
        } else {
            AttentionPartial::empty(cfg.num_heads, cfg.v_head_dim)
        };
        let right = if cut < len {
            let expanded = context[cut..]
                .iter()
                .map(|l| expand_kv(l, &w))
                .collect::<Result<Vec<_>>>()?;
            attend_naive(&q, &expanded, scale, None)?
        } else {
            AttentionPartial::empty(cfg.num_heads, cfg.v_head_dim)
        };
        let merged = combine_lse(&left, &right)?;
        let whole = attend_absorb(&q, &context, &w, scale, None)?;
        let err = merged
            .output
            .iter()
            .zip(&whole.output)
            .map(|(a, b)| rel_err(a, b))
            .fold(lse_diff(&merged, &whole), f64::max);
        report.max_rel_err = report.max_rel_err.max(err);
        if !(err <= tolerance) {
            report.violations += 1;
        }
    }
    Ok(report)
}
