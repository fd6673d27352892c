//! Multi-head latent attention: model shape, weights, projections and the
//! two baseline attention formulations.
//!
//! Naive attention decompresses every cached latent into per-head keys and
//! values and runs ordinary multi-head attention. Absorb attention folds the
//! key up-projection into the query and the value up-projection into the
//! output, so the scores and the weighted sum run directly over the compressed
//! latent cache. Both produce the same numbers; they differ only in cost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::hybrid::AttentionPartial;
use crate::numerics::{dot, rmsnorm, rope, softmax_masked, Matrix, Scalar};

/// Shape of one MLA layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlaConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    /// Per-head query/key width without positional encoding.
    pub nope_head_dim: usize,
    /// Width of the decoupled rotary key/query part.
    pub rope_dim: usize,
    pub v_head_dim: usize,
    pub kv_lora_rank: usize,
    pub q_lora_rank: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

pub const PRESET_NAMES: &[&str] = &["deepseek-v3", "kimi-k2"];

impl MlaConfig {
    pub fn deepseek_v3() -> Self {
        Self {
            model_dim: 7168,
            num_heads: 128,
            nope_head_dim: 128,
            rope_dim: 64,
            v_head_dim: 128,
            kv_lora_rank: 512,
            q_lora_rank: 1536,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    /// Same per-head dims as DeepSeek-v3 with half the heads.
    pub fn kimi_k2() -> Self {
        Self {
            num_heads: 64,
            ..Self::deepseek_v3()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "deepseek-v3" => Ok(Self::deepseek_v3()),
            "kimi-k2" => Ok(Self::kimi_k2()),
            other => Err(Error::Config(format!(
                "unknown model preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    /// A small config for running real math at desk scale.
    pub fn tiny(num_heads: usize, kv_lora_rank: usize) -> Self {
        Self {
            model_dim: 32,
            num_heads,
            nope_head_dim: 8,
            rope_dim: 4,
            v_head_dim: 8,
            kv_lora_rank,
            q_lora_rank: 16,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn qk_head_dim(&self) -> usize {
        self.nope_head_dim + self.rope_dim
    }

    /// Elements per cached token in compressed form, `D_l + D_r`.
    pub fn latent_dim(&self) -> usize {
        self.kv_lora_rank + self.rope_dim
    }

    /// Elements per cached token in expanded form, `H·(D_qk + D_v)`.
    pub fn expanded_dim(&self) -> usize {
        self.num_heads * (self.qk_head_dim() + self.v_head_dim)
    }

    /// MACs per (query, context token) pair in absorb form, `H·(2·D_l + D_r)`.
    pub fn absorb_macs_per_token(&self) -> usize {
        self.num_heads * (2 * self.kv_lora_rank + self.rope_dim)
    }

    pub fn softmax_scale(&self) -> f64 {
        1.0 / (self.qk_head_dim() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("nope_head_dim", self.nope_head_dim),
            ("rope_dim", self.rope_dim),
            ("v_head_dim", self.v_head_dim),
            ("kv_lora_rank", self.kv_lora_rank),
            ("q_lora_rank", self.q_lora_rank),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.rope_dim.is_multiple_of(2) {
            return Err(Error::Config("rope_dim must be even".into()));
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::Config("rope_base and norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Projection weights for one layer. `w_kb` and `w_vb` are the per-head
/// key and value halves of the KV up-projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MlaWeights<T> {
    pub config: MlaConfig,
    /// `[model_dim × q_lora_rank]`
    pub w_qa: Matrix<T>,
    /// `[q_lora_rank × H·D_qk]`
    pub w_qb: Matrix<T>,
    /// `[model_dim × (D_l + D_r)]`
    pub w_kva: Matrix<T>,
    /// per head `[D_l × nope_head_dim]`
    pub w_kb: Vec<Matrix<T>>,
    /// per head `[D_l × D_v]`
    pub w_vb: Vec<Matrix<T>>,
    /// `[H·D_v × model_dim]`
    pub w_o: Matrix<T>,
    pub q_norm_gain: Vec<T>,
    pub kv_norm_gain: Vec<T>,
}

impl<T: Scalar> MlaWeights<T> {
    /// Seeded uniform weights in `[-0.05, 0.05]`, unit norm gains.
    pub fn random(config: &MlaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.random_range(-0.05..=0.05)))
        };
        let c = config;
        let h = c.num_heads;
        let w_qa = uniform(c.model_dim, c.q_lora_rank);
        let w_qb = uniform(c.q_lora_rank, h * c.qk_head_dim());
        let w_kva = uniform(c.model_dim, c.latent_dim());
        let w_kb = (0..h).map(|_| uniform(c.kv_lora_rank, c.nope_head_dim)).collect();
        let w_vb = (0..h).map(|_| uniform(c.kv_lora_rank, c.v_head_dim)).collect();
        let w_o = uniform(h * c.v_head_dim, c.model_dim);
        Ok(Self {
            config: c.clone(),
            w_qa,
            w_qb,
            w_kva,
            w_kb,
            w_vb,
            w_o,
            q_norm_gain: vec![T::one(); c.q_lora_rank],
            kv_norm_gain: vec![T::one(); c.kv_lora_rank],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let h = c.num_heads;
        let check = |name: &str, m: &Matrix<T>, rows: usize, cols: usize| {
            if m.rows() != rows || m.cols() != cols {
                shape_err(format!("{name} is {}x{}, expected {rows}x{cols}", m.rows(), m.cols()))
            } else {
                Ok(())
            }
        };
        check("w_qa", &self.w_qa, c.model_dim, c.q_lora_rank)?;
        check("w_qb", &self.w_qb, c.q_lora_rank, h * c.qk_head_dim())?;
        check("w_kva", &self.w_kva, c.model_dim, c.latent_dim())?;
        check("w_o", &self.w_o, h * c.v_head_dim, c.model_dim)?;
        if self.w_kb.len() != h || self.w_vb.len() != h {
            return shape_err("per-head w_kb / w_vb count must equal num_heads");
        }
        for (kb, vb) in self.w_kb.iter().zip(&self.w_vb) {
            check("w_kb", kb, c.kv_lora_rank, c.nope_head_dim)?;
            check("w_vb", vb, c.kv_lora_rank, c.v_head_dim)?;
        }
        if self.q_norm_gain.len() != c.q_lora_rank || self.kv_norm_gain.len() != c.kv_lora_rank {
            return shape_err("norm gain length mismatch");
        }
        Ok(())
    }

    fn rope_base(&self) -> T {
        T::from_f64_lossy(self.config.rope_base)
    }

    fn norm_eps(&self) -> T {
        T::from_f64_lossy(self.config.norm_eps)
    }
}

/// One cached token in compressed form: the normalised latent and the
/// single-head rotary key.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentKv<T> {
    pub nope: Vec<T>,
    pub pe: Vec<T>,
}

/// One cached token expanded to per-head keys (`[D_qk]`) and values (`[D_v]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedKv<T> {
    pub k: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// Up-projected query, split per head into its no-PE and rotary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryState<T> {
    pub q_nope: Vec<Vec<T>>,
    pub q_pe: Vec<Vec<T>>,
    pub position: usize,
}

impl<T: Scalar> QueryState<T> {
    pub fn num_heads(&self) -> usize {
        self.q_nope.len()
    }

    /// `concat(q_nope, q_pe)` for one head.
    pub fn head(&self, h: usize) -> Vec<T> {
        let mut q = self.q_nope[h].clone();
        q.extend_from_slice(&self.q_pe[h]);
        q
    }
}

fn check_hidden<T>(h: &[T], cfg: &MlaConfig) -> Result<()> {
    if h.len() != cfg.model_dim {
        return shape_err(format!(
            "hidden state has length {}, model_dim is {}",
            h.len(),
            cfg.model_dim
        ));
    }
    Ok(())
}

/// `q = W_Qb · rmsnorm(W_Qa · h)`, split per head, rope on the rotary part.
pub fn project_query<T: Scalar>(h: &[T], w: &MlaWeights<T>, position: usize) -> Result<QueryState<T>> {
    let cfg = &w.config;
    check_hidden(h, cfg)?;
    let latent = w.w_qa.vecmat(h)?;
    let latent = rmsnorm(&latent, &w.q_norm_gain, w.norm_eps())?;
    let q = w.w_qb.vecmat(&latent)?;
    let dqk = cfg.qk_head_dim();
    let mut q_nope = Vec::with_capacity(cfg.num_heads);
    let mut q_pe = Vec::with_capacity(cfg.num_heads);
    for head in q.chunks_exact(dqk) {
        let (nope, pe) = head.split_at(cfg.nope_head_dim);
        q_nope.push(nope.to_vec());
        q_pe.push(rope(pe, position, w.rope_base())?);
    }
    Ok(QueryState { q_nope, q_pe, position })
}

/// `c = W_KVa · h`; the first `D_l` entries are normalised into the no-PE
/// latent, the last `D_r` are rotated into the PE key.
pub fn project_kv<T: Scalar>(h: &[T], w: &MlaWeights<T>, position: usize) -> Result<LatentKv<T>> {
    let cfg = &w.config;
    check_hidden(h, cfg)?;
    let c = w.w_kva.vecmat(h)?;
    let (nope, pe) = c.split_at(cfg.kv_lora_rank);
    Ok(LatentKv {
        nope: rmsnorm(nope, &w.kv_norm_gain, w.norm_eps())?,
        pe: rope(pe, position, w.rope_base())?,
    })
}

fn check_latent<T>(latent: &LatentKv<T>, cfg: &MlaConfig) -> Result<()> {
    if latent.nope.len() != cfg.kv_lora_rank || latent.pe.len() != cfg.rope_dim {
        return shape_err(format!(
            "latent has nope/pe lengths {}/{}, expected {}/{}",
            latent.nope.len(),
            latent.pe.len(),
            cfg.kv_lora_rank,
            cfg.rope_dim
        ));
    }
    Ok(())
}

/// Decompress a latent into per-head keys and values. The PE key is shared
/// by all heads.
pub fn expand_kv<T: Scalar>(latent: &LatentKv<T>, w: &MlaWeights<T>) -> Result<ExpandedKv<T>> {
    check_latent(latent, &w.config)?;
    let mut k = Vec::with_capacity(w.config.num_heads);
    let mut v = Vec::with_capacity(w.config.num_heads);
    for (kb, vb) in w.w_kb.iter().zip(&w.w_vb) {
        let mut kh = kb.vecmat(&latent.nope)?;
        kh.extend_from_slice(&latent.pe);
        k.push(kh);
        v.push(vb.vecmat(&latent.nope)?);
    }
    Ok(ExpandedKv { k, v })
}

/// Standard multi-head attention over expanded keys/values.
///
/// `visible` limits attention to the first `n` tokens (causal boundary);
/// masked tokens get exactly zero weight.
pub fn attend_naive<'a, T, I>(
    q: &QueryState<T>,
    tokens: I,
    scale: T,
    visible: Option<usize>,
) -> Result<AttentionPartial<T>>
where
    T: Scalar,
    I: IntoIterator<Item = &'a ExpandedKv<T>>,
{
    let tokens: Vec<&ExpandedKv<T>> = tokens.into_iter().collect();
    if tokens.is_empty() || visible == Some(0) {
        return arg_err("naive attention over an empty context");
    }
    if !(scale > T::zero()) {
        return arg_err("softmax scale must be positive");
    }
    let heads = q.num_heads();
    let mut output = Vec::with_capacity(heads);
    let mut lse = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.head(h);
        let mut scores = Vec::with_capacity(tokens.len());
        for t in &tokens {
            if t.k.len() != heads || t.k[h].len() != qh.len() {
                return shape_err("expanded key does not match query head layout");
            }
            scores.push(scale * dot(&qh, &t.k[h]));
        }
        let row = softmax_masked(&scores, visible)?;
        let dv = tokens[0].v[h].len();
        let mut out = vec![T::zero(); dv];
        for (p, t) in row.probs.iter().zip(&tokens) {
            if *p == T::zero() {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(&t.v[h]) {
                *o = *o + *p * v;
            }
        }
        output.push(out);
        lse.push(row.lse);
    }
    Ok(AttentionPartial::new(output, lse))
}

/// Latent-space attention over the compressed cache.
///
/// Per head the query is absorbed through `w_kb` into the latent space,
/// scored against no-PE latents plus the PE keys, and the latent weighted
/// sum is lifted back through `w_vb`.
pub fn attend_absorb<'a, T, I>(
    q: &QueryState<T>,
    cache: I,
    w: &MlaWeights<T>,
    scale: T,
    visible: Option<usize>,
) -> Result<AttentionPartial<T>>
where
    T: Scalar,
    I: IntoIterator<Item = &'a LatentKv<T>>,
{
    let cache: Vec<&LatentKv<T>> = cache.into_iter().collect();
    if cache.is_empty() || visible == Some(0) {
        return arg_err("absorb attention over an empty context");
    }
    if !(scale > T::zero()) {
        return arg_err("softmax scale must be positive");
    }
    for latent in &cache {
        check_latent(latent, &w.config)?;
    }
    if q.num_heads() != w.config.num_heads {
        return shape_err("query head count does not match weights");
    }
    let mut output = Vec::with_capacity(q.num_heads());
    let mut lse = Vec::with_capacity(q.num_heads());
    for h in 0..q.num_heads() {
        let absorbed = w.w_kb[h].matvec(&q.q_nope[h])?;
        let scores: Vec<T> = cache
            .iter()
            .map(|c| scale * (dot(&absorbed, &c.nope) + dot(&q.q_pe[h], &c.pe)))
            .collect();
        let row = softmax_masked(&scores, visible)?;
        let mut latent_out = vec![T::zero(); w.config.kv_lora_rank];
        for (p, c) in row.probs.iter().zip(&cache) {
            if *p == T::zero() {
                continue;
            }
            for (o, &n) in latent_out.iter_mut().zip(&c.nope) {
                *o = *o + *p * n;
            }
        }
        output.push(w.w_vb[h].vecmat(&latent_out)?);
        lse.push(row.lse);
    }
    Ok(AttentionPartial::new(output, lse))
}

/// Concatenate per-head outputs and apply `W_O`.
pub fn output_projection<T: Scalar>(heads: &[Vec<T>], w_o: &Matrix<T>) -> Result<Vec<T>> {
    let concat: Vec<T> = heads.iter().flatten().copied().collect();
    w_o.vecmat(&concat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MlaConfig {
        MlaConfig {
            model_dim: 12,
            num_heads: 2,
            nope_head_dim: 4,
            rope_dim: 2,
            v_head_dim: 3,
            kv_lora_rank: 5,
            q_lora_rank: 6,
            rope_base: 10000.0,
            norm_eps: 1e-6,
        }
    }

    fn hidden(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = b.iter().fold(1e-300f64, |s, v| s.max(v.abs()));
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn presets_match_table_coefficients() {
        let d = MlaConfig::deepseek_v3();
        assert_eq!(d.qk_head_dim(), 192);
        assert_eq!(d.expanded_dim(), 40960);
        assert_eq!(d.absorb_macs_per_token(), 139264);
        assert_eq!(d.latent_dim(), 576);
        let k = MlaConfig::preset("kimi-k2").unwrap();
        assert_eq!(k.num_heads, 64);
        assert_eq!(k.expanded_dim(), 20480);
        assert_eq!(k.absorb_macs_per_token(), 69632);
        assert!(MlaConfig::preset("llama").is_err());
    }

    #[test]
    fn config_parses_from_toml_like_map() {
        let cfg: MlaConfig = serde_json::from_str(
            r#"{"model_dim":8,"num_heads":2,"nope_head_dim":4,"rope_dim":2,
                "v_head_dim":4,"kv_lora_rank":8,"q_lora_rank":8}"#,
        )
        .unwrap();
        assert_eq!(cfg.rope_base, 10000.0);
        assert_eq!(cfg.norm_eps, 1e-6);
        let mut bad = cfg.clone();
        bad.rope_dim = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn project_query_identity_weights() {
        // model_dim == q_lora_rank == H·D_qk with identity projections
        let cfg = MlaConfig {
            model_dim: 12,
            q_lora_rank: 12,
            num_heads: 2,
            nope_head_dim: 4,
            rope_dim: 2,
            ..small()
        };
        let mut w = MlaWeights::<f64>::random(&cfg, 1).unwrap();
        w.w_qa = Matrix::identity(12, 12);
        w.w_qb = Matrix::identity(12, 12);
        // unit RMS input
        let h: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let q = project_query(&h, &w, 0).unwrap();
        for head in 0..2 {
            assert!(close(&q.head(head), &h[head * 6..(head + 1) * 6], 1e-6));
        }
    }

    #[test]
    fn projections_are_linear_at_zero() {
        let w = MlaWeights::<f64>::random(&small(), 2).unwrap();
        let q = project_query(&[0.0; 12], &w, 9).unwrap();
        assert!(q.q_nope.iter().flatten().all(|v| *v == 0.0));
        assert!(q.q_pe.iter().flatten().all(|v| *v == 0.0));
        let kv = project_kv(&[0.0; 12], &w, 9).unwrap();
        assert!(kv.nope.iter().chain(&kv.pe).all(|v| *v == 0.0));
        assert!(project_query(&[0.0; 3], &w, 0).is_err());
        assert!(project_kv(&[0.0; 3], &w, 0).is_err());
    }

    #[test]
    fn project_query_matches_composition_oracle() {
        let cfg = small();
        let w = MlaWeights::<f64>::random(&cfg, 3).unwrap();
        let h = hidden(4, cfg.model_dim);
        let q = project_query(&h, &w, 17).unwrap();

        let a = crate::numerics::matmul(&Matrix::new(1, 12, h.clone()).unwrap(), &w.w_qa).unwrap();
        let a = rmsnorm(a.data(), &w.q_norm_gain, 1e-6).unwrap();
        let full = crate::numerics::matmul(&Matrix::new(1, 6, a).unwrap(), &w.w_qb).unwrap();
        for head in 0..2 {
            let s = &full.data()[head * 6..(head + 1) * 6];
            assert!(close(&q.q_nope[head], &s[..4], 1e-12));
            assert!(close(&q.q_pe[head], &rope(&s[4..], 17, 10000.0).unwrap(), 1e-12));
        }
    }

    #[test]
    fn project_kv_matches_composition_oracle() {
        let cfg = small();
        let w = MlaWeights::<f64>::random(&cfg, 5).unwrap();
        let h = hidden(6, cfg.model_dim);
        let c = crate::numerics::matmul(&Matrix::new(1, 12, h.clone()).unwrap(), &w.w_kva).unwrap();
        let kv0 = project_kv(&h, &w, 0).unwrap();
        assert_eq!(kv0.pe, c.data()[5..].to_vec());
        let kv = project_kv(&h, &w, 33).unwrap();
        assert!(close(
            &kv.nope,
            &rmsnorm(&c.data()[..5], &w.kv_norm_gain, 1e-6).unwrap(),
            1e-12
        ));
        assert!(close(&kv.pe, &rope(&c.data()[5..], 33, 10000.0).unwrap(), 1e-12));
    }

    #[test]
    fn expand_kv_cases() {
        let cfg = small();
        let mut w = MlaWeights::<f64>::random(&cfg, 7).unwrap();
        let zero = LatentKv {
            nope: vec![0.0; 5],
            pe: vec![0.25, -0.5],
        };
        let e = expand_kv(&zero, &w).unwrap();
        for h in 0..2 {
            assert_eq!(e.k[h], vec![0.0, 0.0, 0.0, 0.0, 0.25, -0.5]);
            assert_eq!(e.v[h], vec![0.0; 3]);
        }

        let latent = LatentKv {
            nope: hidden(8, 5),
            pe: hidden(9, 2),
        };
        let e = expand_kv(&latent, &w).unwrap();
        let row = Matrix::new(1, 5, latent.nope.clone()).unwrap();
        for h in 0..2 {
            let k = crate::numerics::matmul(&row, &w.w_kb[h]).unwrap();
            let v = crate::numerics::matmul(&row, &w.w_vb[h]).unwrap();
            assert!(close(&e.k[h][..4], k.data(), 1e-12));
            assert_eq!(&e.k[h][4..], latent.pe.as_slice());
            assert!(close(&e.v[h], v.data(), 1e-12));
        }

        w.w_kb = vec![Matrix::identity(5, 4); 2];
        let e = expand_kv(&latent, &w).unwrap();
        assert_eq!(&e.k[0][..4], &latent.nope[..4]);

        let bad = LatentKv {
            nope: vec![0.0; 4],
            pe: vec![0.0; 2],
        };
        assert!(expand_kv(&bad, &w).is_err());
    }

    fn query(w: &MlaWeights<f64>, seed: u64, pos: usize) -> QueryState<f64> {
        project_query(&hidden(seed, w.config.model_dim), w, pos).unwrap()
    }

    fn latents(w: &MlaWeights<f64>, seed: u64, n: usize) -> Vec<LatentKv<f64>> {
        (0..n)
            .map(|i| project_kv(&hidden(seed + i as u64, w.config.model_dim), w, i).unwrap())
            .collect()
    }

    /// Dense reference: explicit score vector, softmax, weighted sum.
    fn dense_oracle(q: &QueryState<f64>, ks: &[ExpandedKv<f64>], scale: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut outs = Vec::new();
        let mut lses = Vec::new();
        for h in 0..q.num_heads() {
            let qh = q.head(h);
            let scores: Vec<f64> = ks.iter().map(|t| scale * dot(&qh, &t.k[h])).collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let mut out = vec![0.0; ks[0].v[h].len()];
            for (s, t) in scores.iter().zip(ks) {
                let p = (s - m).exp() / z;
                for (o, v) in out.iter_mut().zip(&t.v[h]) {
                    *o += p * v;
                }
            }
            outs.push(out);
            lses.push(m + z.ln());
        }
        (outs, lses)
    }

    #[test]
    fn naive_single_key_and_uniform_keys() {
        let w = MlaWeights::<f64>::random(&small(), 11).unwrap();
        let q = query(&w, 12, 3);
        let lat = latents(&w, 13, 1);
        let e = expand_kv(&lat[0], &w).unwrap();
        let scale = w.config.softmax_scale();
        let p = attend_naive(&q, [&e], scale, None).unwrap();
        for h in 0..2 {
            assert_eq!(p.output[h], e.v[h]);
            assert_eq!(p.lse[h], scale * dot(&q.head(h), &e.k[h]));
        }

        let mut same = vec![e.clone(); 4];
        for (i, t) in same.iter_mut().enumerate() {
            for v in t.v.iter_mut() {
                v.iter_mut().for_each(|x| *x += i as f64);
            }
        }
        let p = attend_naive(&q, &same, scale, None).unwrap();
        for h in 0..2 {
            for d in 0..3 {
                let mean: f64 = same.iter().map(|t| t.v[h][d]).sum::<f64>() / 4.0;
                assert!((p.output[h][d] - mean).abs() < 1e-12);
            }
        }
        assert!(attend_naive::<f64, _>(&q, &[], scale, None).is_err());
        assert!(attend_naive(&q, &same, 0.0, None).is_err());
    }

    #[test]
    fn naive_matches_dense_oracle() {
        let w = MlaWeights::<f64>::random(&small(), 21).unwrap();
        let q = query(&w, 22, 5);
        let ks: Vec<_> = latents(&w, 23, 5).iter().map(|l| expand_kv(l, &w).unwrap()).collect();
        let scale = w.config.softmax_scale();
        let p = attend_naive(&q, &ks, scale, None).unwrap();
        let (outs, lses) = dense_oracle(&q, &ks, scale);
        for h in 0..2 {
            assert!(close(&p.output[h], &outs[h], 1e-6));
            assert!((p.lse[h] - lses[h]).abs() <= 1e-6);
        }
    }

    #[test]
    fn absorb_matches_naive_over_expansion() {
        let w = MlaWeights::<f64>::random(&small(), 31).unwrap();
        let scale = w.config.softmax_scale();
        for n in [1usize, 2, 9, 40] {
            let q = query(&w, 32 + n as u64, n);
            let lat = latents(&w, 100 + n as u64, n);
            let ks: Vec<_> = lat.iter().map(|l| expand_kv(l, &w).unwrap()).collect();
            let a = attend_absorb(&q, &lat, &w, scale, None).unwrap();
            let b = attend_naive(&q, &ks, scale, None).unwrap();
            for h in 0..2 {
                assert!(close(&a.output[h], &b.output[h], 1e-10));
                assert!((a.lse[h] - b.lse[h]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn absorb_single_entry_returns_lifted_latent() {
        let w = MlaWeights::<f64>::random(&small(), 41).unwrap();
        let q = query(&w, 42, 0);
        let lat = latents(&w, 43, 1);
        let p = attend_absorb(&q, &lat, &w, 0.3, None).unwrap();
        for h in 0..2 {
            assert_eq!(p.output[h], w.w_vb[h].vecmat(&lat[0].nope).unwrap());
        }
    }

    #[test]
    fn absorb_f32_agrees_with_naive() {
        let cfg = MlaConfig::tiny(4, 16);
        let w = MlaWeights::<f32>::random(&cfg, 51).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut h = || -> Vec<f32> { (0..cfg.model_dim).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let q = project_query(&h(), &w, 20).unwrap();
        let lat: Vec<_> = (0..20).map(|i| project_kv(&h(), &w, i).unwrap()).collect();
        let ks: Vec<_> = lat.iter().map(|l| expand_kv(l, &w).unwrap()).collect();
        let scale = cfg.softmax_scale() as f32;
        let a = attend_absorb(&q, &lat, &w, scale, None).unwrap();
        let b = attend_naive(&q, &ks, scale, None).unwrap();
        for hd in 0..4 {
            let scale = b.output[hd].iter().fold(1e-30f32, |s, v| s.max(v.abs()));
            for (x, y) in a.output[hd].iter().zip(&b.output[hd]) {
                assert!((x - y).abs() <= 1e-5 * scale);
            }
            assert!((a.lse[hd] - b.lse[hd]).abs() <= 1e-5 * (1.0 + b.lse[hd].abs()));
        }
    }

    #[test]
    fn causal_mask_matches_truncated_context() {
        let w = MlaWeights::<f64>::random(&small(), 61).unwrap();
        let q = query(&w, 62, 4);
        let lat = latents(&w, 63, 8);
        let masked = attend_absorb(&q, &lat, &w, 0.4, Some(3)).unwrap();
        let truncated = attend_absorb(&q, &lat[..3], &w, 0.4, None).unwrap();
        assert_eq!(masked, truncated);
        assert!(attend_absorb(&q, &lat, &w, 0.4, Some(0)).is_err());
    }

    #[test]
    fn output_projection_cases() {
        let cfg = MlaConfig {
            model_dim: 6,
            ..small()
        };
        let mut w = MlaWeights::<f64>::random(&cfg, 71).unwrap();
        let heads = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        w.w_o = Matrix::identity(6, 6);
        assert_eq!(
            output_projection(&heads, &w.w_o).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        );
        let w = MlaWeights::<f64>::random(&cfg, 72).unwrap();
        assert_eq!(
            output_projection(&[vec![0.0; 3], vec![0.0; 3]], &w.w_o).unwrap(),
            vec![0.0; 6]
        );
        let got = output_projection(&heads, &w.w_o).unwrap();
        let want = crate::numerics::matmul(&Matrix::new(1, 6, heads.concat()).unwrap(), &w.w_o).unwrap();
        assert!(close(&got, want.data(), 1e-12));
        assert!(output_projection(&heads[..1], &w.w_o).is_err());
    }

    #[test]
    fn random_weights_are_seeded_and_bounded() {
        let a = MlaWeights::<f64>::random(&small(), 9).unwrap();
        let b = MlaWeights::<f64>::random(&small(), 9).unwrap();
        assert_eq!(a, b);
        assert!(a.w_qb.data().iter().all(|v| v.abs() <= 0.05));
        a.validate().unwrap();
    }
}
