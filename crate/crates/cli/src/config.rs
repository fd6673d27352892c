//! Run configuration: a TOML file with one table per section, overridden by
//! `MLA_<SECTION>_<KEY>` environment variables, overridden in turn by flags.

use std::path::Path;

use mla_engine::costmodel::{HardwareProfile, Method, ParallelismConfig, SweepSpec};
use mla_engine::hybrid::{FallbackMode, FallbackPolicy};
use mla_engine::mla::MlaConfig;
use mla_engine::simbench::LengthDist;
use mla_engine::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "MLA_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub model_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub nope_head_dim: Option<usize>,
    pub rope_dim: Option<usize>,
    pub v_head_dim: Option<usize>,
    pub kv_lora_rank: Option<usize>,
    pub q_lora_rank: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "deepseek-v3".into(),
            model_dim: None,
            num_heads: None,
            nope_head_dim: None,
            rope_dim: None,
            v_head_dim: None,
            kv_lora_rank: None,
            q_lora_rank: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<MlaConfig> {
        let mut c = MlaConfig::preset(&self.preset)?;
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.model_dim, self.model_dim);
        set(&mut c.num_heads, self.num_heads);
        set(&mut c.nope_head_dim, self.nope_head_dim);
        set(&mut c.rope_dim, self.rope_dim);
        set(&mut c.v_head_dim, self.v_head_dim);
        set(&mut c.kv_lora_rank, self.kv_lora_rank);
        set(&mut c.q_lora_rank, self.q_lora_rank);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareSection {
    pub preset: String,
    pub peak_flops: Option<f64>,
    pub hbm_bandwidth: Option<f64>,
    pub dtype_bytes: Option<f64>,
}

impl Default for HardwareSection {
    fn default() -> Self {
        Self {
            preset: "ascend-910-class".into(),
            peak_flops: None,
            hbm_bandwidth: None,
            dtype_bytes: None,
        }
    }
}

impl HardwareSection {
    pub fn resolve(&self) -> Result<HardwareProfile> {
        let mut hw = HardwareProfile::preset(&self.preset)?;
        if let Some(v) = self.peak_flops {
            hw.peak_flops = v;
        }
        if let Some(v) = self.hbm_bandwidth {
            hw.hbm_bandwidth = v;
        }
        if let Some(v) = self.dtype_bytes {
            hw.dtype_bytes = v;
        }
        hw.validate()?;
        Ok(hw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub block_size: usize,
    /// Unset: size the pool to fit the batch.
    pub num_pages: Option<usize>,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            block_size: mla_engine::kvcache::DEFAULT_BLOCK_SIZE,
            num_pages: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub mode: FallbackMode,
    /// Unset: the rounded crossover batch of the model and hardware.
    pub threshold_batch: Option<usize>,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            mode: FallbackMode::Auto,
            threshold_batch: None,
        }
    }
}

impl PolicySection {
    pub fn resolve(&self, cfg: &MlaConfig, hw: &HardwareProfile) -> Result<FallbackPolicy> {
        let threshold = self
            .threshold_batch
            .unwrap_or_else(|| FallbackPolicy::for_hardware(cfg, hw).threshold_batch);
        FallbackPolicy::new(threshold, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub format: Format,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { format: Format::Csv }
    }
}

/// Reduced dims for running the real attention math.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub num_heads: usize,
    pub kv_lora_rank: usize,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            num_heads: 8,
            kv_lora_rank: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub batch_size: usize,
    pub prefix_len: usize,
    pub tail_len: LengthDist,
    pub gen_len: LengthDist,
    /// Unset: one request per batch slot.
    pub requests: Option<usize>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            prefix_len: 64,
            tail_len: LengthDist::fixed(16),
            gen_len: LengthDist::fixed(4),
            requests: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Vec<Method>,
    pub batches: Vec<u64>,
    pub s_q: u64,
    pub l_s: Vec<u64>,
    pub l_n: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Naive, Method::Absorb, Method::Typhoon],
            batches: (0..=10).map(|i| 1u64 << i).collect(),
            s_q: 1,
            l_s: vec![4096],
            l_n: vec![0],
        }
    }
}

impl SweepSection {
    pub fn spec(&self) -> SweepSpec {
        SweepSpec {
            methods: self.methods.clone(),
            batches: self.batches.clone(),
            s_q: self.s_q,
            l_s: self.l_s.clone(),
            l_n: self.l_n.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FootprintSection {
    pub batches: Vec<u64>,
    pub max_seqs: Vec<u64>,
    pub l_s: u64,
    pub use_typhoon: bool,
    pub parallelism: ParallelismConfig,
}

impl Default for FootprintSection {
    fn default() -> Self {
        Self {
            batches: vec![4096, 8192, 16384, 32768],
            max_seqs: vec![32768, 65536, 131072, 262144],
            l_s: 26472,
            use_typhoon: true,
            parallelism: ParallelismConfig::cloudmatrix_384(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub hardware: HardwareSection,
    pub cache: CacheSection,
    pub policy: PolicySection,
    pub output: OutputSection,
    pub engine: EngineSection,
    pub workload: WorkloadSection,
    pub sweep: SweepSection,
    pub footprint: FootprintSection,
}

/// Parse an environment value as a TOML value, falling back to a string.
fn env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply `MLA_<SECTION>_<KEY>=value` overrides. Section names are a single
/// word, so everything after the first underscore is the key.
pub fn apply_env<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let rest = rest.to_ascii_lowercase();
        let Some((section, key)) = rest.split_once('_') else {
            return Err(Error::Config(format!("environment override {name} has no key")));
        };
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(sec) = entry else {
            return Err(Error::Config(format!("config entry '{section}' is not a section")));
        };
        sec.insert(key.to_string(), env_value(&raw));
    }
    Ok(())
}

/// Read the file (if any), apply environment overrides, and deserialize.
pub fn load<I>(path: Option<&Path>, vars: I) -> Result<FileConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    apply_env(&mut table, vars)?;
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}
