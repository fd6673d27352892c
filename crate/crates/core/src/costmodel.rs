//! Analytical cost model: MAC and HBM-read counts per formulation, roofline
//! timing, the absorb/naive crossover batch size and the HBM footprint of
//! keeping a shared prefix expanded.
//!
//! Counts are exact integers. FLOPs are always `2 × MACs`. HBM traffic is
//! counted in elements and only turned into bytes against a
//! [`HardwareProfile`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mla::MlaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Absorb,
    Typhoon,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Naive, Method::Absorb, Method::Typhoon];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Absorb => "absorb",
            Method::Typhoon => "typhoon",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Method::Naive),
            "absorb" => Ok(Method::Absorb),
            "typhoon" | "hybrid" => Ok(Method::Typhoon),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// `B`, `S_q`, `L_s`, `L_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadShape {
    pub batch: u64,
    pub s_q: u64,
    pub l_s: u64,
    pub l_n: u64,
}

impl WorkloadShape {
    pub fn new(batch: u64, s_q: u64, l_s: u64, l_n: u64) -> Self {
        Self { batch, s_q, l_s, l_n }
    }

    pub fn query_tokens(&self) -> u64 {
        self.batch * self.s_q
    }
}

/// A quantity split into the shared-prefix part and the per-sequence part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Split {
    pub shared: u128,
    pub nonshared: u128,
}

impl Split {
    pub fn total(&self) -> u128 {
        self.shared + self.nonshared
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub method: Method,
    pub macs_shared: u128,
    pub macs_nonshared: u128,
    pub hbm_elems_shared: u128,
    pub hbm_elems_nonshared: u128,
}

impl CostBreakdown {
    pub fn macs_total(&self) -> u128 {
        self.macs_shared + self.macs_nonshared
    }

    pub fn hbm_elems_total(&self) -> u128 {
        self.hbm_elems_shared + self.hbm_elems_nonshared
    }
}

fn expanded(cfg: &MlaConfig) -> u128 {
    cfg.expanded_dim() as u128
}

fn absorb_per_token(cfg: &MlaConfig) -> u128 {
    cfg.absorb_macs_per_token() as u128
}

fn latent(cfg: &MlaConfig) -> u128 {
    cfg.latent_dim() as u128
}

/// Multiply-accumulates for self-attention only (no projections).
pub fn macs(method: Method, shape: &WorkloadShape, cfg: &MlaConfig) -> Split {
    let q = shape.batch as u128 * shape.s_q as u128;
    let (ls, ln) = (shape.l_s as u128, shape.l_n as u128);
    let (shared_coef, nonshared_coef) = match method {
        Method::Naive => (expanded(cfg), expanded(cfg)),
        Method::Absorb => (absorb_per_token(cfg), absorb_per_token(cfg)),
        Method::Typhoon => (expanded(cfg), absorb_per_token(cfg)),
    };
    Split {
        shared: q * ls * shared_coef,
        nonshared: q * ln * nonshared_coef,
    }
}

/// Elements read from HBM. The shared prefix is read once per batch; the
/// non-shared part once per sequence.
pub fn hbm_elems(method: Method, shape: &WorkloadShape, cfg: &MlaConfig) -> Split {
    let b = shape.batch as u128;
    let (ls, ln) = (shape.l_s as u128, shape.l_n as u128);
    let (shared_coef, nonshared_coef) = match method {
        Method::Naive => (expanded(cfg), expanded(cfg)),
        Method::Absorb => (latent(cfg), latent(cfg)),
        Method::Typhoon => (expanded(cfg), latent(cfg)),
    };
    Split {
        shared: ls * shared_coef,
        nonshared: b * ln * nonshared_coef,
    }
}

pub fn cost(method: Method, shape: &WorkloadShape, cfg: &MlaConfig) -> CostBreakdown {
    let m = macs(method, shape, cfg);
    let h = hbm_elems(method, shape, cfg);
    CostBreakdown {
        method,
        macs_shared: m.shared,
        macs_nonshared: m.nonshared,
        hbm_elems_shared: h.shared,
        hbm_elems_nonshared: h.nonshared,
    }
}

/// Peak compute (FLOP/s), HBM bandwidth (B/s) and element width in bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    #[serde(default)]
    pub name: String,
    pub peak_flops: f64,
    pub hbm_bandwidth: f64,
    pub dtype_bytes: f64,
}

pub const HARDWARE_PRESETS: &[&str] = &["ascend-910-class", "fig2-npu", "gpu-h-class"];

impl HardwareProfile {
    pub fn new(name: &str, peak_flops: f64, hbm_bandwidth: f64, dtype_bytes: f64) -> Result<Self> {
        let hw = Self {
            name: name.to_string(),
            peak_flops,
            hbm_bandwidth,
            dtype_bytes,
        };
        hw.validate()?;
        Ok(hw)
    }

    /// NPU measured in the experiments: 376 TFLOPS FP16, 1.8 TB/s.
    pub fn ascend_910_class() -> Self {
        Self {
            name: "ascend-910-class".into(),
            peak_flops: 376e12,
            hbm_bandwidth: 1.8e12,
            dtype_bytes: 2.0,
        }
    }

    /// NPU used for the roofline plots: 400 TFLOPS, 1.8 TB/s.
    pub fn fig2_npu() -> Self {
        Self {
            name: "fig2-npu".into(),
            peak_flops: 400e12,
            hbm_bandwidth: 1.8e12,
            dtype_bytes: 2.0,
        }
    }

    /// GPU: 1 PFLOPS FP16, 3.3 TB/s.
    pub fn gpu_h_class() -> Self {
        Self {
            name: "gpu-h-class".into(),
            peak_flops: 1e15,
            hbm_bandwidth: 3.3e12,
            dtype_bytes: 2.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ascend-910-class" => Ok(Self::ascend_910_class()),
            "fig2-npu" => Ok(Self::fig2_npu()),
            "gpu-h-class" => Ok(Self::gpu_h_class()),
            other => Err(Error::Config(format!(
                "unknown hardware preset '{other}' (known: {})",
                HARDWARE_PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        // +inf is allowed for limit studies
        for (name, v) in [
            ("peak_flops", self.peak_flops),
            ("hbm_bandwidth", self.hbm_bandwidth),
            ("dtype_bytes", self.dtype_bytes),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Roofline time of one part: the slower of compute and memory.
pub fn part_time(flops: f64, bytes: f64, hw: &HardwareProfile) -> f64 {
    let compute = if flops == 0.0 { 0.0 } else { flops / hw.peak_flops };
    let memory = if bytes == 0.0 { 0.0 } else { bytes / hw.hbm_bandwidth };
    compute.max(memory)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartTimes {
    pub shared: f64,
    pub nonshared: f64,
}

impl PartTimes {
    pub fn total(&self) -> f64 {
        self.shared + self.nonshared
    }
}

pub fn part_times(method: Method, shape: &WorkloadShape, cfg: &MlaConfig, hw: &HardwareProfile) -> PartTimes {
    let m = macs(method, shape, cfg);
    let h = hbm_elems(method, shape, cfg);
    PartTimes {
        shared: part_time(2.0 * m.shared as f64, h.shared as f64 * hw.dtype_bytes, hw),
        nonshared: part_time(2.0 * m.nonshared as f64, h.nonshared as f64 * hw.dtype_bytes, hw),
    }
}

/// Query tokens per second for one attention call.
pub fn roofline_throughput(method: Method, shape: &WorkloadShape, cfg: &MlaConfig, hw: &HardwareProfile) -> f64 {
    let t = part_times(method, shape, cfg, hw).total();
    if t == 0.0 {
        return 0.0;
    }
    shape.query_tokens() as f64 / t
}

/// Upper bound reported when absorb never loses the shared part.
pub const MAX_CROSSOVER_BATCH: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Crossover {
    /// Batch size at which naive and absorb take equal time on the shared part.
    pub analytic: f64,
    /// Smallest integer batch where naive is strictly faster.
    pub integer: u64,
    /// `integer` rounded up to a power of two; used as the fallback threshold.
    pub rounded: u64,
}

/// Batch size above which the naive formulation wins the shared part.
///
/// Naive is memory-bound on the shared part at the crossover (it reads
/// `H·(D_qk+D_v)` elements per token once) while absorb is compute-bound
/// (`2·B·H·(2·D_l+D_r)` FLOPs per token), so the crossover is the ratio of
/// the two per-token costs. It does not depend on `L_s`.
pub fn crossover_batch(cfg: &MlaConfig, hw: &HardwareProfile) -> Crossover {
    let naive_mem = cfg.expanded_dim() as f64 * hw.dtype_bytes / hw.hbm_bandwidth;
    let absorb_per_query = 2.0 * cfg.absorb_macs_per_token() as f64 / hw.peak_flops;
    let analytic = naive_mem / absorb_per_query;
    let integer = if analytic.is_nan() || analytic >= MAX_CROSSOVER_BATCH as f64 {
        MAX_CROSSOVER_BATCH
    } else if analytic < 1.0 {
        1
    } else {
        analytic.floor() as u64 + 1
    };
    let rounded = integer.next_power_of_two().min(MAX_CROSSOVER_BATCH);
    Crossover {
        analytic,
        integer,
        rounded,
    }
}

/// Device layout for the footprint model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelismConfig {
    pub devices: u64,
    pub dp: u64,
    pub tp: u64,
    pub sp: u64,
    pub layers: u64,
    /// Total parameter count; spread evenly over all devices.
    pub weight_params: f64,
    pub weight_dtype_bytes: f64,
    pub cache_dtype_bytes: f64,
    /// Tensor-parallel shards of the compressed cache. The latent cache has
    /// a single head, so it is replicated across TP ranks by default (1).
    #[serde(default = "one")]
    pub cache_tp_shards: u64,
}

fn one() -> u64 {
    1
}

impl ParallelismConfig {
    /// 384 devices with DP/TP/SP = 24/4/4, 61 layers and 671B parameters,
    /// FP8 weights and cache. The parameter count is an assumption of this
    /// model, not a measured value.
    pub fn cloudmatrix_384() -> Self {
        Self {
            devices: 384,
            dp: 24,
            tp: 4,
            sp: 4,
            layers: 61,
            weight_params: 671e9,
            weight_dtype_bytes: 1.0,
            cache_dtype_bytes: 1.0,
            cache_tp_shards: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 || self.dp == 0 || self.tp == 0 || self.sp == 0 || self.cache_tp_shards == 0 {
            return Err(Error::Config("parallelism factors must be at least 1".into()));
        }
        if !self.devices.is_multiple_of(self.dp * self.tp * self.sp) {
            return Err(Error::Config(format!(
                "dp*tp*sp = {} does not divide {} devices",
                self.dp * self.tp * self.sp,
                self.devices
            )));
        }
        if self.cache_tp_shards > self.tp {
            return Err(Error::Config("cache_tp_shards cannot exceed tp".into()));
        }
        Ok(())
    }
}

/// Per-device HBM usage in bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FootprintReport {
    pub batch: u64,
    pub max_seq: u64,
    pub l_s: u64,
    pub use_typhoon: bool,
    pub weights: f64,
    pub compressed_cache: f64,
    pub expanded_shared: f64,
    pub total: f64,
    /// `expanded_shared / (weights + compressed_cache)`
    pub overhead_ratio: f64,
    /// Expanded prefix bytes for one layer before any sharding.
    pub expanded_shared_per_layer_unsharded: f64,
}

pub fn hbm_footprint(
    cfg: &MlaConfig,
    par: &ParallelismConfig,
    batch: u64,
    max_seq: u64,
    l_s: u64,
    use_typhoon: bool,
) -> Result<FootprintReport> {
    par.validate()?;
    let layers = par.layers as f64;
    let weights = par.weight_params * par.weight_dtype_bytes / par.devices as f64;
    let seqs_per_replica = (batch / par.dp) as f64;
    let compressed = layers * seqs_per_replica * max_seq as f64 * cfg.latent_dim() as f64 * par.cache_dtype_bytes
        / (par.sp * par.cache_tp_shards) as f64;
    let per_layer = l_s as f64 * cfg.expanded_dim() as f64 * par.cache_dtype_bytes;
    let expanded_shared = if use_typhoon {
        layers * per_layer / (par.tp * par.sp) as f64
    } else {
        0.0
    };
    let base = weights + compressed;
    Ok(FootprintReport {
        batch,
        max_seq,
        l_s,
        use_typhoon,
        weights,
        compressed_cache: compressed,
        expanded_shared,
        total: base + expanded_shared,
        overhead_ratio: if base > 0.0 { expanded_shared / base } else { 0.0 },
        expanded_shared_per_layer_unsharded: per_layer,
    })
}

/// Grid of shapes to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub batches: Vec<u64>,
    pub s_q: u64,
    pub l_s: Vec<u64>,
    pub l_n: Vec<u64>,
}

/// One CSV row: `method,B,S_q,L_s,L_n,macs,hbm_bytes,time_s,tokens_per_s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: String,
    #[serde(rename = "B")]
    pub batch: u64,
    #[serde(rename = "S_q")]
    pub s_q: Option<u64>,
    #[serde(rename = "L_s")]
    pub l_s: Option<u64>,
    #[serde(rename = "L_n")]
    pub l_n: Option<u64>,
    pub macs: Option<u128>,
    pub hbm_bytes: Option<f64>,
    pub time_s: Option<f64>,
    pub tokens_per_s: Option<f64>,
}

pub const SWEEP_COLUMNS: &[&str] = &[
    "method",
    "B",
    "S_q",
    "L_s",
    "L_n",
    "macs",
    "hbm_bytes",
    "time_s",
    "tokens_per_s",
];

pub fn sweep_row(method: Method, shape: &WorkloadShape, cfg: &MlaConfig, hw: &HardwareProfile) -> SweepRow {
    let c = cost(method, shape, cfg);
    let t = part_times(method, shape, cfg, hw).total();
    SweepRow {
        method: method.to_string(),
        batch: shape.batch,
        s_q: Some(shape.s_q),
        l_s: Some(shape.l_s),
        l_n: Some(shape.l_n),
        macs: Some(c.macs_total()),
        hbm_bytes: Some(c.hbm_elems_total() as f64 * hw.dtype_bytes),
        time_s: Some(t),
        tokens_per_s: Some(roofline_throughput(method, shape, cfg, hw)),
    }
}

/// Evaluate every `(method, L_s, L_n, B)` in the spec, followed by one
/// annotation row (method `crossover`) carrying the rounded crossover batch.
pub fn sweep(spec: &SweepSpec, cfg: &MlaConfig, hw: &HardwareProfile) -> Result<Vec<SweepRow>> {
    if spec.methods.is_empty() || spec.batches.is_empty() || spec.l_s.is_empty() || spec.l_n.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one method, batch, L_s and L_n".into(),
        ));
    }
    if spec.s_q == 0 || spec.batches.contains(&0) {
        return Err(Error::Config("batch sizes and S_q must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &method in &spec.methods {
        for &l_s in &spec.l_s {
            for &l_n in &spec.l_n {
                for &b in &spec.batches {
                    rows.push(sweep_row(method, &WorkloadShape::new(b, spec.s_q, l_s, l_n), cfg, hw));
                }
            }
        }
    }
    let x = crossover_batch(cfg, hw);
    rows.push(SweepRow {
        method: "crossover".into(),
        batch: x.rounded,
        s_q: None,
        l_s: None,
        l_n: None,
        macs: None,
        hbm_bytes: None,
        time_s: None,
        tokens_per_s: None,
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds() -> MlaConfig {
        MlaConfig::deepseek_v3()
    }

    #[test]
    fn table_golden_values() {
        let s = WorkloadShape::new(1, 1, 1, 0);
        assert_eq!(macs(Method::Naive, &s, &ds()).total(), 40960);
        assert_eq!(macs(Method::Absorb, &s, &ds()).total(), 139264);
        let s = WorkloadShape::new(2, 1, 10, 5);
        assert_eq!(macs(Method::Typhoon, &s, &ds()).total(), 2_211_840);
        assert_eq!(
            hbm_elems(Method::Absorb, &WorkloadShape::new(1, 1, 1, 0), &ds()).total(),
            576
        );
        for b in [1, 7, 1024] {
            let s = WorkloadShape::new(b, 1, 0, 1);
            assert_eq!(hbm_elems(Method::Typhoon, &s, &ds()).total(), b as u128 * 576);
            assert_eq!(
                hbm_elems(Method::Typhoon, &s, &ds()),
                hbm_elems(Method::Absorb, &s, &ds())
            );
        }
        let s = WorkloadShape::new(1, 1, 0, 1);
        let ratio = hbm_elems(Method::Naive, &s, &ds()).nonshared as f64
            / hbm_elems(Method::Typhoon, &s, &ds()).nonshared as f64;
        assert!((ratio - 71.11).abs() < 0.01);
    }

    #[test]
    fn part_time_limits() {
        let hw = HardwareProfile::ascend_910_class();
        assert_eq!(part_time(0.0, 3.6e12, &hw), 2.0);
        assert_eq!(part_time(376e12, 0.0, &hw), 1.0);
        assert_eq!(part_time(0.0, 0.0, &hw), 0.0);

        // absorb shared part at B=1024, L_s=4096 is compute-bound
        let s = WorkloadShape::new(1024, 1, 4096, 0);
        let m = macs(Method::Absorb, &s, &ds()).shared as f64 * 2.0;
        let b = hbm_elems(Method::Absorb, &s, &ds()).shared as f64 * 2.0;
        assert!(m / hw.peak_flops > b / hw.hbm_bandwidth);
        assert_eq!(part_time(m, b, &hw), m / hw.peak_flops);
    }

    #[test]
    fn roofline_shapes() {
        let hw = HardwareProfile::fig2_npu();
        let at = |m, b| roofline_throughput(m, &WorkloadShape::new(b, 1, 4096, 0), &ds(), &hw);
        // absorb plateau
        let flat = at(Method::Absorb, 256);
        for b in [512, 1024, 4096] {
            assert!((at(Method::Absorb, b) - flat).abs() <= 1e-9 * flat);
        }
        let want = 400e12 / (2.0 * 4096.0 * 139264.0);
        assert!((flat - want).abs() <= 1e-9 * want);
        assert!((flat - 3.5e5).abs() / 3.5e5 < 0.01);
        // compute-bound naive over absorb
        let ratio = at(Method::Naive, 1 << 16) / at(Method::Absorb, 1 << 16);
        assert!((ratio - 3.4).abs() < 1e-9);
        // memory-bound region favours absorb
        assert!(at(Method::Absorb, 1) > at(Method::Naive, 1));
        // naive non-decreasing in B
        let mut prev = 0.0;
        for b in 0..14 {
            let t = at(Method::Naive, 1 << b);
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn crossover_for_npu() {
        let x = crossover_batch(&ds(), &HardwareProfile::ascend_910_class());
        assert!((x.analytic - 61.44).abs() < 0.01, "{}", x.analytic);
        assert_eq!(x.integer, 62);
        assert_eq!(x.rounded, 64);
        let k = crossover_batch(&MlaConfig::kimi_k2(), &HardwareProfile::ascend_910_class());
        assert_eq!(k.analytic, x.analytic);

        // direct check of the defining inequality on the shared part
        let hw = HardwareProfile::ascend_910_class();
        let t = |m, b| part_times(m, &WorkloadShape::new(b, 1, 4096, 0), &ds(), &hw).shared;
        assert!(t(Method::Naive, 61) >= t(Method::Absorb, 61));
        assert!(t(Method::Naive, 62) < t(Method::Absorb, 62));
    }

    #[test]
    fn crossover_limits() {
        let inf_bw = HardwareProfile {
            hbm_bandwidth: f64::INFINITY,
            ..HardwareProfile::ascend_910_class()
        };
        assert_eq!(crossover_batch(&ds(), &inf_bw).rounded, 1);
        let inf_peak = HardwareProfile {
            peak_flops: f64::INFINITY,
            ..HardwareProfile::ascend_910_class()
        };
        assert_eq!(crossover_batch(&ds(), &inf_peak).integer, MAX_CROSSOVER_BATCH);
        assert!(HardwareProfile::new("x", 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn footprint_examples() {
        let par = ParallelismConfig::cloudmatrix_384();
        let off = hbm_footprint(&ds(), &par, 4096, 32768, 26472, false).unwrap();
        assert_eq!(off.expanded_shared, 0.0);
        assert_eq!(off.overhead_ratio, 0.0);
        assert_eq!(off.total, off.weights + off.compressed_cache);
        let on = hbm_footprint(&ds(), &par, 4096, 32768, 26472, true).unwrap();
        assert_eq!(on.expanded_shared_per_layer_unsharded, 26472.0 * 40960.0);
        assert!((on.expanded_shared_per_layer_unsharded / 1e9 - 1.084).abs() < 0.001);
        assert_eq!(on.weights, off.weights);
        assert_eq!(on.compressed_cache, off.compressed_cache);
        let zero = hbm_footprint(&ds(), &par, 4096, 32768, 0, true).unwrap();
        assert_eq!(zero.overhead_ratio, 0.0);

        let mut bad = par.clone();
        bad.dp = 5;
        assert!(hbm_footprint(&ds(), &bad, 1, 1, 1, true).is_err());
    }

    #[test]
    fn sweep_emits_annotation_row() {
        let spec = SweepSpec {
            methods: vec![Method::Naive, Method::Absorb],
            batches: vec![1, 2],
            s_q: 1,
            l_s: vec![4096],
            l_n: vec![0, 512],
        };
        let rows = sweep(&spec, &ds(), &HardwareProfile::ascend_910_class()).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2 + 1);
        assert_eq!(rows.last().unwrap().method, "crossover");
        assert_eq!(rows.last().unwrap().batch, 64);
        assert!(sweep(
            &SweepSpec {
                batches: vec![],
                ..spec
            },
            &ds(),
            &HardwareProfile::fig2_npu()
        )
        .is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("Typhoon".parse::<Method>().unwrap(), Method::Typhoon);
        assert_eq!("absorb".parse::<Method>().unwrap(), Method::Absorb);
        assert!("flash".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn dominance(b in 1u64..5000, sq in 1u64..8, ls in 0u64..100_000, ln in 0u64..100_000, kimi in any::<bool>()) {
            let cfg = if kimi { MlaConfig::kimi_k2() } else { ds() };
            let s = WorkloadShape::new(b, sq, ls, ln);
            let ty = cost(Method::Typhoon, &s, &cfg);
            let ab = cost(Method::Absorb, &s, &cfg);
            let nv = cost(Method::Naive, &s, &cfg);
            prop_assert!(ty.macs_total() <= ab.macs_total());
            prop_assert_eq!(ty.macs_total() == ab.macs_total(), ls == 0);
            prop_assert!(ty.hbm_elems_total() <= nv.hbm_elems_total());
            prop_assert_eq!(ty.hbm_elems_total() == nv.hbm_elems_total(), ln == 0);
        }
    }
}
