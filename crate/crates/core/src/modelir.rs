//! Declarative descriptions of models, attention backends, hardware and
//! workloads. All of them are plain JSON documents carrying
//! `schema_version: 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error at `{path}`: {message}")]
    Validation { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

/// Attention span of one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionKind {
    Full,
    Sliding { window: u64 },
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionKind::Full => f.write_str("full"),
            AttentionKind::Sliding { window } => write!(f, "swa{window}"),
        }
    }
}

impl FromStr for AttentionKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "full" {
            return Ok(AttentionKind::Full);
        }
        s.strip_prefix("swa")
            .and_then(|w| w.parse::<u64>().ok())
            .filter(|w| *w > 0)
            .map(|window| AttentionKind::Sliding { window })
            .ok_or_else(|| ConfigError::Parse(format!("bad attention kind {s:?}")))
    }
}

impl Serialize for AttentionKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AttentionKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: u64,
    pub top_k: u64,
    pub expert_intermediate: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub hidden_dim: u64,
    pub num_layers: u64,
    pub num_q_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub intermediate_size: u64,
    pub vocab_size: u64,
    pub dtype_bytes: u64,
    pub layer_attention: Vec<AttentionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeConfig>,
    pub max_context: u64,
}

impl ModelConfig {
    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("dtype_bytes", self.dtype_bytes),
            ("max_context", self.max_context),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{path}.{field}"), "must be positive"));
            }
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(invalid(
                format!("{path}.num_kv_heads"),
                format!(
                    "{} query heads are not divisible by {} kv heads",
                    self.num_q_heads, self.num_kv_heads
                ),
            ));
        }
        if self.hidden_dim != self.num_q_heads * self.head_dim {
            return Err(invalid(
                format!("{path}.hidden_dim"),
                format!(
                    "{} != num_q_heads x head_dim = {}",
                    self.hidden_dim,
                    self.num_q_heads * self.head_dim
                ),
            ));
        }
        if self.layer_attention.len() as u64 != self.num_layers {
            return Err(invalid(
                format!("{path}.layer_attention"),
                format!(
                    "has {} entries for {} layers",
                    self.layer_attention.len(),
                    self.num_layers
                ),
            ));
        }
        for (i, k) in self.layer_attention.iter().enumerate() {
            if let AttentionKind::Sliding { window } = k {
                if *window > self.max_context {
                    return Err(invalid(
                        format!("{path}.layer_attention[{i}]"),
                        "window exceeds max_context",
                    ));
                }
            }
        }
        if let Some(moe) = &self.moe {
            if moe.num_experts == 0 || moe.expert_intermediate == 0 {
                return Err(invalid(format!("{path}.moe"), "must be positive"));
            }
            if moe.top_k == 0 || moe.top_k > moe.num_experts {
                return Err(invalid(format!("{path}.moe.top_k"), "must be in 1..=num_experts"));
            }
        }
        Ok(())
    }

    /// KV-cache bytes for one token across all layers (K and V).
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.num_kv_heads * self.head_dim * self.dtype_bytes * self.num_layers
    }

    /// Distinct attention kinds in layer order of first appearance.
    pub fn attention_kinds(&self) -> Vec<AttentionKind> {
        let mut seen = BTreeSet::new();
        self.layer_attention
            .iter()
            .copied()
            .filter(|k| seen.insert(*k))
            .collect()
    }
}

/// Canonical attention geometry string for one layer, e.g. `q32/kv8/d128/full`.
///
/// Panics if `layer` is out of range.
pub fn geometry_key(cfg: &ModelConfig, layer: usize) -> String {
    geometry_key_for(cfg, cfg.layer_attention[layer])
}

pub fn geometry_key_for(cfg: &ModelConfig, kind: AttentionKind) -> String {
    format!(
        "q{}/kv{}/d{}/{}",
        cfg.num_q_heads, cfg.num_kv_heads, cfg.head_dim, kind
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub const BOTH: [Phase; 2] = [Phase::Prefill, Phase::Decode];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

impl FromStr for Phase {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prefill" => Ok(Phase::Prefill),
            "decode" => Ok(Phase::Decode),
            _ => Err(ConfigError::Parse(format!("bad phase {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTableEntry {
    pub geometry: String,
    pub phase: Phase,
    pub kernels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    pub kernel_table: Vec<KernelTableEntry>,
    #[serde(default)]
    pub cost_multiplier: BTreeMap<String, f64>,
}

impl BackendSpec {
    /// Attention kernel symbols for a geometry and phase.
    pub fn kernels(&self, geometry: &str, phase: Phase) -> Option<&[String]> {
        self.kernel_table
            .iter()
            .find(|e| e.geometry == geometry && e.phase == phase)
            .map(|e| e.kernels.as_slice())
    }

    /// Product of the cost multipliers of `symbols` (missing symbols count as 1).
    pub fn multiplier<'a>(&self, symbols: impl IntoIterator<Item = &'a String>) -> f64 {
        symbols
            .into_iter()
            .map(|s| self.cost_multiplier.get(s).copied().unwrap_or(1.0))
            .product()
    }

    fn validate(&self, path: &str) -> Result<(), ConfigError> {
        if self.name.is_empty() {
            return Err(invalid(format!("{path}.name"), "must not be empty"));
        }
        let mut keys = BTreeSet::new();
        for (i, e) in self.kernel_table.iter().enumerate() {
            let p = format!("{path}.kernel_table[{i}]");
            if !keys.insert((e.geometry.clone(), e.phase)) {
                return Err(invalid(p, "duplicate (geometry, phase) entry"));
            }
            if e.kernels.is_empty() {
                return Err(invalid(format!("{p}.kernels"), "must not be empty"));
            }
            let uniq: BTreeSet<_> = e.kernels.iter().collect();
            if uniq.len() != e.kernels.len() {
                return Err(invalid(format!("{p}.kernels"), "kernel symbols must be unique"));
            }
        }
        for (k, m) in &self.cost_multiplier {
            if !(m.is_finite() && *m > 0.0) {
                return Err(invalid(format!("{path}.cost_multiplier.{k}"), "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    /// flop/s
    pub peak_flops: f64,
    /// bytes/s
    pub mem_bw: f64,
    /// seconds
    pub comm_alpha: f64,
    /// seconds per byte
    pub comm_beta: f64,
    pub topology: String,
    /// bytes
    pub memory_capacity: u64,
}

impl HardwareSpec {
    /// A100-like fp16 defaults.
    pub fn a100() -> Self {
        Self {
            name: "a100-sxm4-80gb".into(),
            peak_flops: 3.12e14,
            mem_bw: 2.039e12,
            comm_alpha: 5e-6,
            comm_beta: 5e-12,
            topology: "nvlink3-4gpu".into(),
            memory_capacity: 80 * (1 << 30),
        }
    }

    fn validate(&self, path: &str) -> Result<(), ConfigError> {
        for (field, v) in [
            ("peak_flops", self.peak_flops),
            ("mem_bw", self.mem_bw),
            ("comm_alpha", self.comm_alpha),
            ("comm_beta", self.comm_beta),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{path}.{field}"), "must be positive"));
            }
        }
        if self.memory_capacity == 0 {
            return Err(invalid(format!("{path}.memory_capacity"), "must be positive"));
        }
        Ok(())
    }
}

pub const DEFAULT_TOKEN_COUNTS: [u64; 7] = [1, 16, 128, 512, 2048, 8192, 32768];
pub const DEFAULT_REQUEST_COUNTS: [u64; 4] = [1, 8, 64, 256];
pub const DEFAULT_KV_LENS: [u64; 4] = [0, 512, 4096, 16384];

fn default_kv_lens() -> Vec<u64> {
    DEFAULT_KV_LENS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub token_counts: Vec<u64>,
    pub request_counts: Vec<u64>,
    #[serde(default = "default_kv_lens")]
    pub kv_lens: Vec<u64>,
    pub prefill_chunk: u64,
    pub max_batch: u64,
}

impl SweepGrid {
    /// Default grid for a chunk size and batch cap.
    pub fn defaults(prefill_chunk: u64, max_batch: u64) -> Self {
        Self {
            token_counts: DEFAULT_TOKEN_COUNTS.to_vec(),
            request_counts: DEFAULT_REQUEST_COUNTS.to_vec(),
            kv_lens: DEFAULT_KV_LENS.to_vec(),
            prefill_chunk,
            max_batch,
        }
        .capped(u64::MAX)
    }

    /// Token counts capped at the chunk, request counts at the batch cap and
    /// kv lengths at `max_context`. Values above a cap collapse onto it.
    pub fn capped(&self, max_context: u64) -> Self {
        fn cap(v: &[u64], c: u64) -> Vec<u64> {
            let s: BTreeSet<u64> = v.iter().map(|x| (*x).min(c)).collect();
            s.into_iter().collect()
        }
        Self {
            token_counts: cap(&self.token_counts, self.prefill_chunk),
            request_counts: cap(&self.request_counts, self.max_batch),
            kv_lens: cap(&self.kv_lens, max_context),
            prefill_chunk: self.prefill_chunk,
            max_batch: self.max_batch,
        }
    }

    /// Keep every `factor`-th point on each axis (always keeping the last).
    pub fn thinned(&self, factor: usize) -> Self {
        fn thin(v: &[u64], k: usize) -> Vec<u64> {
            let k = k.max(1);
            let mut out: Vec<u64> = v.iter().copied().step_by(k).collect();
            if let Some(last) = v.last() {
                if out.last() != Some(last) {
                    out.push(*last);
                }
            }
            out
        }
        Self {
            token_counts: thin(&self.token_counts, factor),
            request_counts: thin(&self.request_counts, factor),
            kv_lens: thin(&self.kv_lens, factor),
            ..self.clone()
        }
    }

    fn validate(&self, path: &str, max_context: u64) -> Result<(), ConfigError> {
        for (field, v) in [
            ("token_counts", &self.token_counts),
            ("request_counts", &self.request_counts),
            ("kv_lens", &self.kv_lens),
        ] {
            if v.is_empty() {
                return Err(invalid(format!("{path}.{field}"), "must not be empty"));
            }
            if let Some(x) = v.iter().find(|x| **x > max_context) {
                return Err(invalid(
                    format!("{path}.{field}"),
                    format!("{x} exceeds max_context {max_context}"),
                ));
            }
        }
        if self.token_counts.contains(&0) || self.request_counts.contains(&0) {
            return Err(invalid(path, "token and request counts must be positive"));
        }
        if self.prefill_chunk == 0 || self.max_batch == 0 {
            return Err(invalid(path, "prefill_chunk and max_batch must be positive"));
        }
        Ok(())
    }
}

/// Everything needed to profile a set of (model, backend) configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub models: Vec<ModelConfig>,
    pub backends: Vec<BackendSpec>,
    pub hardware: HardwareSpec,
    pub tp_degree: u64,
    pub grid: SweepGrid,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        if self.models.is_empty() {
            return Err(invalid("models", "must not be empty"));
        }
        if self.backends.is_empty() {
            return Err(invalid("backends", "must not be empty"));
        }
        if self.tp_degree == 0 {
            return Err(invalid("tp_degree", "must be positive"));
        }
        let mut names = BTreeSet::new();
        for (i, m) in self.models.iter().enumerate() {
            let p = format!("models[{i}]");
            m.validate(&p)?;
            if !names.insert(m.name.as_str()) {
                return Err(invalid(format!("{p}.name"), "duplicate model name"));
            }
            if m.num_q_heads % self.tp_degree != 0 || m.intermediate_size % self.tp_degree != 0 {
                return Err(invalid(p, format!("not shardable by tp_degree {}", self.tp_degree)));
            }
        }
        let mut bnames = BTreeSet::new();
        for (i, b) in self.backends.iter().enumerate() {
            let p = format!("backends[{i}]");
            b.validate(&p)?;
            if !bnames.insert(b.name.as_str()) {
                return Err(invalid(format!("{p}.name"), "duplicate backend name"));
            }
            for m in &self.models {
                for kind in m.attention_kinds() {
                    let g = geometry_key_for(m, kind);
                    for phase in Phase::BOTH {
                        if b.kernels(&g, phase).is_none() {
                            return Err(invalid(
                                format!("{p}.kernel_table"),
                                format!("no {} entry for geometry {g} used by {}", phase.as_str(), m.name),
                            ));
                        }
                    }
                }
            }
        }
        self.hardware.validate("hardware")?;
        let max_context = self.models.iter().map(|m| m.max_context).max().unwrap_or(0);
        self.grid.validate("grid", max_context)?;
        Ok(())
    }

    pub fn model(&self, name: &str) -> Option<&ModelConfig> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn backend(&self, name: &str) -> Option<&BackendSpec> {
        self.backends.iter().find(|b| b.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let m: CorpusManifest =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CorpusManifest::from_json(&text)
}

/// One inference request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    #[serde(default)]
    pub id: usize,
    pub arrival_s: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    /// Prompt tokens already resident in the KV cache.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub cached_tokens: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadMode {
    Stream,
    SingleBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    Poisson,
    TraceFile,
}

/// Log-normal length distribution given by its median and mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub median: f64,
    pub mean: f64,
}

impl LengthDist {
    /// `(mu, sigma)` of the underlying normal.
    pub fn lognormal_params(&self) -> (f64, f64) {
        let mu = self.median.ln();
        let sigma = (2.0 * (self.mean / self.median).ln()).max(0.0).sqrt();
        (mu, sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    /// requests per second
    pub rate: f64,
    pub arrival: Arrival,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_requests: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    PrefillHeavy,
    DecodeHeavy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleBatchSpec {
    pub kind: BatchKind,
    pub total_tokens: u64,
    pub batch_size: u64,
    #[serde(default)]
    pub cached_context: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub schema_version: u32,
    pub mode: WorkloadMode,
    pub max_context: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub single_batch: Option<SingleBatchSpec>,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid("schema_version", "unsupported"));
        }
        if self.max_context < 2 {
            return Err(invalid("max_context", "must be at least 2"));
        }
        match self.mode {
            WorkloadMode::Stream => {
                let s = self
                    .stream
                    .as_ref()
                    .ok_or_else(|| invalid("stream", "required for stream mode"))?;
                match s.arrival {
                    Arrival::Poisson => {
                        if !(s.rate.is_finite() && s.rate > 0.0) {
                            return Err(invalid("stream.rate", "must be positive"));
                        }
                        if s.duration_s.is_none() && s.num_requests.is_none() {
                            return Err(invalid("stream", "needs duration_s or num_requests"));
                        }
                    }
                    Arrival::TraceFile => {
                        if s.trace_path.is_none() {
                            return Err(invalid("stream.trace_path", "required for trace_file"));
                        }
                    }
                }
                for (field, d) in [("prompt_len", s.prompt_len), ("output_len", s.output_len)] {
                    if !(d.median >= 1.0 && d.mean >= d.median && d.mean.is_finite()) {
                        return Err(invalid(
                            format!("stream.{field}"),
                            "need 1 <= median <= mean",
                        ));
                    }
                }
            }
            WorkloadMode::SingleBatch => {
                let b = self
                    .single_batch
                    .as_ref()
                    .ok_or_else(|| invalid("single_batch", "required for single_batch mode"))?;
                if b.batch_size == 0 {
                    return Err(invalid("single_batch.batch_size", "must be positive"));
                }
                if b.kind == BatchKind::PrefillHeavy && b.total_tokens < b.batch_size {
                    return Err(invalid("single_batch.total_tokens", "fewer tokens than requests"));
                }
                if b.kind == BatchKind::DecodeHeavy && b.cached_context + 1 > self.max_context {
                    return Err(invalid("single_batch.cached_context", "exceeds max_context"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let w: WorkloadSpec =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        w.validate()?;
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Read JSON-lines request records, sorted by arrival and renumbered.
pub fn read_request_trace(path: &Path) -> Result<Vec<Request>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Request = serde_json::from_str(line)
            .map_err(|e| ConfigError::Parse(format!("line {}: {e}", i + 1)))?;
        if r.prompt_tokens == 0 || r.output_tokens == 0 || r.arrival_s.is_nan() || r.arrival_s < 0.0 {
            return Err(invalid(format!("line {}", i + 1), "lengths must be positive"));
        }
        out.push(r);
    }
    out.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s));
    for (i, r) in out.iter_mut().enumerate() {
        r.id = i;
    }
    Ok(out)
}

fn sample_len(d: &LengthDist, rng: &mut ChaCha8Rng, lo: u64, hi: u64) -> u64 {
    let (mu, sigma) = d.lognormal_params();
    let x = if sigma == 0.0 {
        d.median
    } else {
        LogNormal::new(mu, sigma).expect("valid lognormal").sample(rng)
    };
    (x.round() as u64).clamp(lo, hi)
}

/// Generate a request list. Deterministic in `(spec, seed)`.
pub fn sample_workload(spec: &WorkloadSpec, seed: u64) -> Result<Vec<Request>, ConfigError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.mode {
        WorkloadMode::Stream => {
            let s = spec.stream.as_ref().expect("validated");
            if s.arrival == Arrival::TraceFile {
                let mut reqs = read_request_trace(s.trace_path.as_ref().expect("validated"))?;
                if let Some(n) = s.num_requests {
                    reqs.truncate(n);
                }
                return Ok(reqs);
            }
            let gap = Exp::new(s.rate).expect("positive rate");
            let mut t = 0.0;
            let mut out = Vec::new();
            loop {
                t += gap.sample(&mut rng);
                if s.duration_s.is_some_and(|d| t > d) {
                    break;
                }
                if s.num_requests.is_some_and(|n| out.len() >= n) {
                    break;
                }
                let prompt = sample_len(&s.prompt_len, &mut rng, 1, spec.max_context - 1);
                let output = sample_len(&s.output_len, &mut rng, 1, spec.max_context - prompt);
                out.push(Request {
                    id: out.len(),
                    arrival_s: t,
                    prompt_tokens: prompt,
                    output_tokens: output,
                    cached_tokens: 0,
                });
            }
            Ok(out)
        }
        WorkloadMode::SingleBatch => {
            let b = spec.single_batch.as_ref().expect("validated");
            let n = b.batch_size;
            Ok((0..n)
                .map(|i| match b.kind {
                    BatchKind::PrefillHeavy => Request {
                        id: i as usize,
                        arrival_s: 0.0,
                        prompt_tokens: b.total_tokens / n + u64::from(i < b.total_tokens % n),
                        output_tokens: 1,
                        cached_tokens: 0,
                    },
                    BatchKind::DecodeHeavy => Request {
                        id: i as usize,
                        arrival_s: 0.0,
                        prompt_tokens: b.cached_context + 1,
                        output_tokens: 1,
                        cached_tokens: b.cached_context,
                    },
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn llama31_8b() -> ModelConfig {
        ModelConfig {
            name: "llama-3.1-8b".into(),
            hidden_dim: 4096,
            num_layers: 32,
            num_q_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            intermediate_size: 14336,
            vocab_size: 128256,
            dtype_bytes: 2,
            layer_attention: vec![AttentionKind::Full; 32],
            moe: None,
            max_context: 131072,
        }
    }

    #[test]
    fn geometry_keys() {
        let mut m = llama31_8b();
        assert_eq!(geometry_key(&m, 3), "q32/kv8/d128/full");
        m.layer_attention[0] = AttentionKind::Sliding { window: 4096 };
        assert_eq!(geometry_key(&m, 0), "q32/kv8/d128/swa4096");
        m.num_kv_heads = 32;
        assert_eq!(geometry_key(&m, 1), "q32/kv32/d128/full");
    }

    #[test]
    fn hidden_dim_mismatch_rejected() {
        let mut m = llama31_8b();
        m.hidden_dim = 4000;
        let err = m.validate("models[0]").unwrap_err();
        assert!(matches!(err, ConfigError::Validation { ref path, .. } if path == "models[0].hidden_dim"));
    }

    #[test]
    fn gqa_divisibility_checked() {
        let mut m = llama31_8b();
        m.num_kv_heads = 5;
        assert!(m.validate("m").is_err());
    }

    #[test]
    fn attention_kind_text() {
        assert_eq!("swa4096".parse::<AttentionKind>().unwrap(), AttentionKind::Sliding { window: 4096 });
        assert!("swa".parse::<AttentionKind>().is_err());
        assert!("swa0".parse::<AttentionKind>().is_err());
    }

    #[test]
    fn prefill_heavy_splits_evenly() {
        let spec = WorkloadSpec {
            schema_version: 1,
            mode: WorkloadMode::SingleBatch,
            max_context: 131072,
            stream: None,
            single_batch: Some(SingleBatchSpec {
                kind: BatchKind::PrefillHeavy,
                total_tokens: 16384,
                batch_size: 4,
                cached_context: 0,
            }),
        };
        let reqs = sample_workload(&spec, 0).unwrap();
        assert_eq!(reqs.len(), 4);
        assert!(reqs.iter().all(|r| r.prompt_tokens == 4096 && r.output_tokens == 1));
    }

    #[test]
    fn lognormal_params_match_moments() {
        let d = LengthDist { median: 950.0, mean: 1232.0 };
        let (mu, sigma) = d.lognormal_params();
        assert!((mu.exp() - 950.0).abs() < 1e-9);
        assert!(((mu + sigma * sigma / 2.0).exp() - 1232.0).abs() < 1e-9);
    }

    #[test]
    fn grid_caps_collapse() {
        let g = SweepGrid::defaults(8192, 64);
        assert_eq!(g.token_counts, vec![1, 16, 128, 512, 2048, 8192]);
        assert_eq!(g.request_counts, vec![1, 8, 64]);
        assert_eq!(g.capped(4096).kv_lens, vec![0, 512, 4096]);
    }
}
