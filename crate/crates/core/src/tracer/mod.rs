//! Symbolic forward pass with per-dimension taint tracking.
//!
//! No tensor data is ever materialized: each op records its tainted input
//! shapes, derives output shapes through [`dims`], and emits module /
//! operation / kernel events with depth-first tick timestamps.

pub mod chrome;
pub mod dims;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::modelir::{geometry_key_for, AttentionKind, BackendSpec, ModelConfig, Phase};
use crate::taint::{Registration, Taint, TaintError, TaintRegistry, TaintedValue};

pub use dims::{map_dims, preserve_dims, MapOp, PreserveKind, Shape, TaintedDim};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("retrace failed: batch collided on {first:?}, retry collided on {second:?}")]
    RetraceFailed { first: Vec<u64>, second: Vec<u64> },
    #[error("backend {backend} has no {phase} kernels for geometry {geometry}")]
    MissingKernels {
        backend: String,
        geometry: String,
        phase: &'static str,
    },
    #[error("tensor parallel degree {tp} does not shard {what} = {value}")]
    BadShard { tp: u64, what: &'static str, value: u64 },
    #[error(transparent)]
    Taint(#[from] TaintError),
    #[error("malformed trace file: {0}")]
    Format(String),
}

/// The fixed symbolic op vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Embedding,
    RmsNorm,
    Linear,
    Reshape,
    Rope,
    KvCacheWrite,
    Attention,
    SiluAndMul,
    TopkRouter,
    FusedMoe,
    AllReduce,
    IndexSelect,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Embedding,
        OpKind::RmsNorm,
        OpKind::Linear,
        OpKind::Reshape,
        OpKind::Rope,
        OpKind::KvCacheWrite,
        OpKind::Attention,
        OpKind::SiluAndMul,
        OpKind::TopkRouter,
        OpKind::FusedMoe,
        OpKind::AllReduce,
        OpKind::IndexSelect,
    ];

    /// Dispatcher-level name recorded in traces.
    pub fn op_name(self) -> &'static str {
        match self {
            OpKind::Embedding => "aten::embedding",
            OpKind::RmsNorm => "vllm::fused_add_rms_norm",
            OpKind::Linear => "aten::linear",
            OpKind::Reshape => "aten::reshape",
            OpKind::Rope => "vllm::rotary_embedding",
            OpKind::KvCacheWrite => "vllm::reshape_and_cache_flash",
            OpKind::Attention => "vllm::unified_attention",
            OpKind::SiluAndMul => "vllm::silu_and_mul",
            OpKind::TopkRouter => "vllm::topk_softmax",
            OpKind::FusedMoe => "vllm::fused_experts",
            OpKind::AllReduce => "c10d::all_reduce",
            OpKind::IndexSelect => "aten::index_select",
        }
    }

    pub fn from_op_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.op_name() == name)
    }

    /// Kinds that cannot execute without serving-engine state.
    pub fn is_context_dependent(self) -> bool {
        matches!(self, OpKind::KvCacheWrite | OpKind::Attention | OpKind::FusedMoe)
    }

    pub fn is_collective(self) -> bool {
        self == OpKind::AllReduce
    }

    /// Fixed kernel launches; attention kernels come from the backend.
    fn fixed_kernels(self) -> &'static [&'static str] {
        match self {
            OpKind::Embedding => &["indexSelectLargeIndex"],
            OpKind::RmsNorm => &["vllm::fused_add_rms_norm_kernel"],
            OpKind::Linear => &["sm80_xmma_gemm_f16f16_f16f32_f32_tn_n_tilesize128x128x32"],
            OpKind::Reshape | OpKind::AllReduce | OpKind::Attention => &[],
            OpKind::Rope => &["vllm::rotary_embedding_kernel"],
            OpKind::KvCacheWrite => &["vllm::reshape_and_cache_flash_kernel"],
            OpKind::SiluAndMul => &["vllm::act_and_mul_kernel<silu>"],
            OpKind::TopkRouter => &["vllm::moe::topkGatingSoftmax"],
            OpKind::FusedMoe => &[
                "vllm::moe::moe_align_block_size_kernel",
                "fused_moe_kernel",
                "vllm::moe::moe_sum_kernel",
            ],
            OpKind::IndexSelect => &["indexSelectSmallIndex"],
        }
    }

    /// Output sizes for concrete input sizes, or an error if the call is
    /// ill-formed. `attrs` carries the reshape target.
    pub fn shape_fn(
        self,
        inputs: &[Vec<u64>],
        scalars: &[u64],
        attrs: &BTreeMap<String, AttrValue>,
    ) -> Result<Vec<u64>, TraceError> {
        let bad = |m: &str| Err(TraceError::ShapeMismatch(format!("{}: {m}", self.op_name())));
        let arg = |i: usize| inputs.get(i).map(|v| v.as_slice()).unwrap_or(&[]);
        match self {
            OpKind::Embedding => match (arg(0), arg(1)) {
                ([t], [_, h]) => Ok(vec![*t, *h]),
                _ => bad("expects ids [T] and weight [V, H]"),
            },
            OpKind::RmsNorm => match (arg(0), arg(1), arg(2)) {
                (x @ [_, h], r, [w]) if r == x && w == h => Ok(x.to_vec()),
                _ => bad("expects x [T, H], residual [T, H], weight [H]"),
            },
            OpKind::Linear => match (arg(0), arg(1)) {
                ([a, k], [k2, b]) if k == k2 => Ok(vec![*a, *b]),
                _ => bad("expects [M, K] x [K, N]"),
            },
            OpKind::Reshape => {
                let target = attrs
                    .get("target")
                    .and_then(AttrValue::as_str)
                    .ok_or_else(|| TraceError::ShapeMismatch("reshape without target".into()))?;
                let target = parse_target(target)?;
                dims::resolve_target(arg(0).iter().product(), &target)
            }
            OpKind::Rope => match (arg(0), arg(1), arg(2)) {
                ([t], q @ [tq, _, d], [tk, _, dk]) if t == tq && t == tk && d == dk => Ok(q.to_vec()),
                _ => bad("expects positions [T], q [T, Hq, D], k [T, Hkv, D]"),
            },
            OpKind::KvCacheWrite => match (arg(0), arg(1), arg(2)) {
                (k @ [t, _, _], v, [s]) if k == v && s == t => Ok(vec![]),
                _ => bad("expects k, v [T, Hkv, D] and slot_mapping [T]"),
            },
            OpKind::Attention => match (arg(0), arg(1), arg(2), arg(3)) {
                (q @ [t, hq, d], k @ [tk, hk, dk], v, [_]) if t == tk && d == dk && k == v && hq % hk == 0 => {
                    Ok(q.to_vec())
                }
                _ => bad("expects q [T, Hq, D], k, v [T, Hkv, D], seq_lens [R]"),
            },
            OpKind::SiluAndMul => match arg(0) {
                [t, two_i] if two_i % 2 == 0 => Ok(vec![*t, two_i / 2]),
                _ => bad("expects [T, 2I]"),
            },
            OpKind::TopkRouter => match (arg(0), scalars) {
                ([t, e], [k, ..]) if k <= e => Ok(vec![*t, *k]),
                _ => bad("expects logits [T, E] and top_k"),
            },
            OpKind::FusedMoe => match (arg(0), arg(1), arg(2), arg(3)) {
                ([t, h], [e, two_i, h1], [e2, h2, i], [tk])
                    if h == h1 && h == h2 && e == e2 && *two_i == 2 * i && tk % t == 0 =>
                {
                    Ok(vec![*tk, *h])
                }
                _ => bad("expects x [T, H], w13 [E, 2I, H], w2 [E, H, I], sorted ids [T*k]"),
            },
            OpKind::AllReduce => match arg(0) {
                [] => bad("expects one tensor"),
                x => Ok(x.to_vec()),
            },
            OpKind::IndexSelect => match (arg(0), arg(1)) {
                ([_, h], [r]) => Ok(vec![*r, *h]),
                _ => bad("expects x [T, H], index [R]"),
            },
        }
    }
}

fn parse_target(s: &str) -> Result<Vec<i64>, TraceError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| TraceError::ShapeMismatch(format!("bad reshape target {s:?}")))
        })
        .collect()
}

fn format_target(t: &[i64]) -> String {
    t.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Primitive attribute values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Int(i64),
    Str(String),
}

impl AttrValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(i) => Some(*i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Module,
    Operation,
    Kernel,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Module => "module",
            Category::Operation => "operation",
            Category::Kernel => "kernel",
        }
    }
}

/// Module attribute naming the module class.
pub const ATTR_CLASS: &str = "class";
/// Module attribute marking a stateful module and its kind.
pub const ATTR_STATEFUL: &str = "stateful";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub id: u64,
    pub parent_id: Option<u64>,
    pub category: Category,
    pub name: String,
    pub begin: u64,
    pub end: u64,
    pub inputs: Vec<Shape>,
    pub scalars: Vec<TaintedValue>,
    pub attrs: BTreeMap<String, AttrValue>,
    pub kernel_symbols: Vec<String>,
}

impl TraceEvent {
    pub fn op_kind(&self) -> Option<OpKind> {
        match self.category {
            Category::Operation => OpKind::from_op_name(&self.name),
            _ => None,
        }
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(AttrValue::as_str)
    }

    pub fn dims(&self) -> impl Iterator<Item = &TaintedDim> {
        self.inputs.iter().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DummyBatch {
    pub num_reqs: u64,
    pub tokens_per_req: u64,
}

impl DummyBatch {
    pub fn total_tokens(&self) -> u64 {
        self.num_reqs * self.tokens_per_req
    }

    /// First batch from the prime sequences whose values (and product) avoid
    /// every model-config value and everything in `avoid`.
    pub fn collision_free(cfg: &ModelConfig, tp: u64, avoid: &BTreeSet<u64>) -> DummyBatch {
        let taken: BTreeSet<u64> = model_values(cfg, tp).into_iter().chain(avoid.iter().copied()).collect();
        let free = |v: u64| !taken.contains(&v);
        let reqs = primes_from(2).find(|p| free(*p)).expect("primes are unbounded");
        let tokens = primes_from(269)
            .find(|p| free(*p) && free(p * reqs) && *p != reqs)
            .expect("primes are unbounded");
        DummyBatch {
            num_reqs: reqs,
            tokens_per_req: tokens,
        }
    }
}

fn primes_from(start: u64) -> impl Iterator<Item = u64> {
    (start.max(2)..).filter(|n| (2..).take_while(|d| d * d <= *n).all(|d| n % d != 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOptions {
    pub tp: u64,
    pub phase: Phase,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            tp: 1,
            phase: Phase::Decode,
        }
    }
}

impl TraceOptions {
    pub fn with_tp(tp: u64) -> Self {
        Self { tp, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaintedTrace {
    pub model: String,
    pub backend: String,
    pub options: TraceOptions,
    pub batch: DummyBatch,
    pub events: Vec<TraceEvent>,
    pub registry: TaintRegistry,
    /// Values that collided in the final pass (empty after a successful retrace).
    pub ambiguities: Vec<u64>,
    /// Collisions of the first pass when a retrace happened.
    pub retraced_from: Option<(DummyBatch, Vec<u64>)>,
}

impl TaintedTrace {
    pub fn kernel_count(&self) -> usize {
        self.events.iter().filter(|e| e.category == Category::Kernel).count()
    }
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Per-rank sizes under tensor parallelism.
struct Shard {
    q_heads: u64,
    kv_heads: u64,
    intermediate: u64,
    vocab: u64,
    expert_intermediate: Option<u64>,
}

impl Shard {
    fn new(cfg: &ModelConfig, tp: u64) -> Result<Self, TraceError> {
        let exact = |what, value: u64| {
            if value.is_multiple_of(tp) {
                Ok(value / tp)
            } else {
                Err(TraceError::BadShard { tp, what, value })
            }
        };
        let kv_heads = if cfg.num_kv_heads >= tp {
            exact("num_kv_heads", cfg.num_kv_heads)?
        } else {
            1
        };
        Ok(Self {
            q_heads: exact("num_q_heads", cfg.num_q_heads)?,
            kv_heads,
            intermediate: exact("intermediate_size", cfg.intermediate_size)?,
            vocab: ceil_div(cfg.vocab_size, tp),
            expert_intermediate: cfg
                .moe
                .as_ref()
                .map(|m| exact("expert_intermediate", m.expert_intermediate))
                .transpose()?,
        })
    }
}

/// Every model-config value the trace can observe, including derived and
/// tp-sharded ones.
pub fn model_values(cfg: &ModelConfig, tp: u64) -> BTreeSet<u64> {
    let tp = tp.max(1);
    let mut v = BTreeSet::from([
        cfg.hidden_dim,
        cfg.num_layers,
        cfg.num_q_heads,
        cfg.num_kv_heads,
        cfg.head_dim,
        cfg.intermediate_size,
        2 * cfg.intermediate_size,
        cfg.vocab_size,
        cfg.max_context,
        cfg.num_q_heads * cfg.head_dim,
        cfg.num_kv_heads * cfg.head_dim,
        (cfg.num_q_heads + 2 * cfg.num_kv_heads) * cfg.head_dim,
    ]);
    for k in &cfg.layer_attention {
        if let AttentionKind::Sliding { window } = k {
            v.insert(*window);
        }
    }
    if let Some(moe) = &cfg.moe {
        v.extend([moe.num_experts, moe.top_k, moe.expert_intermediate, 2 * moe.expert_intermediate]);
    }
    if tp > 1 {
        v.insert(tp);
        if let Ok(s) = Shard::new(cfg, tp) {
            v.extend([
                s.q_heads,
                s.kv_heads,
                s.q_heads * cfg.head_dim,
                s.kv_heads * cfg.head_dim,
                (s.q_heads + 2 * s.kv_heads) * cfg.head_dim,
                s.intermediate,
                2 * s.intermediate,
                s.vocab,
            ]);
            if let Some(ei) = s.expert_intermediate {
                v.extend([ei, 2 * ei]);
            }
        }
    }
    v
}

/// Seed the registry with model-config and batch sources. Returns the
/// registry and any values that collided.
pub fn seed_sources(cfg: &ModelConfig, batch: &DummyBatch, tp: u64) -> (TaintRegistry, Vec<u64>) {
    let mut reg = TaintRegistry::new();
    let mut amb = Vec::new();
    let mut put = |reg: &mut TaintRegistry, v, t| {
        if let Registration::AmbiguityDetected(x) = reg.register(v, t) {
            if !amb.contains(&x) {
                amb.push(x);
            }
        }
    };
    for v in model_values(cfg, tp) {
        put(&mut reg, v, Taint::MC);
    }
    put(&mut reg, batch.num_reqs, Taint::NR);
    put(&mut reg, batch.tokens_per_req, Taint::NT);
    put(&mut reg, batch.total_tokens(), Taint::NT);
    (reg, amb)
}

/// Trace one forward pass, retracing once with a collision-free batch if the
/// first pass hits an ambiguity.
pub fn run_trace(
    cfg: &ModelConfig,
    backend: &BackendSpec,
    batch: DummyBatch,
    opts: &TraceOptions,
) -> Result<TaintedTrace, TraceError> {
    let first = trace_once(cfg, backend, batch, opts)?;
    if first.ambiguities.is_empty() {
        return Ok(first);
    }
    let avoid: BTreeSet<u64> = first
        .ambiguities
        .iter()
        .copied()
        .chain([batch.num_reqs, batch.tokens_per_req])
        .chain(first.registry.entries().keys().copied())
        .collect();
    let retry = DummyBatch::collision_free(cfg, opts.tp, &avoid);
    let mut second = trace_once(cfg, backend, retry, opts)?;
    if !second.ambiguities.is_empty() {
        return Err(TraceError::RetraceFailed {
            first: first.ambiguities,
            second: second.ambiguities,
        });
    }
    second.retraced_from = Some((batch, first.ambiguities));
    Ok(second)
}

fn trace_once(
    cfg: &ModelConfig,
    backend: &BackendSpec,
    batch: DummyBatch,
    opts: &TraceOptions,
) -> Result<TaintedTrace, TraceError> {
    let tp = opts.tp.max(1);
    let shard = Shard::new(cfg, tp)?;
    let (registry, ambiguities) = seed_sources(cfg, &batch, tp);
    let mut b = Builder {
        cfg,
        backend,
        phase: opts.phase,
        tp,
        shard,
        reg: registry,
        ambiguities,
        events: Vec::new(),
        stack: Vec::new(),
        tick: 0,
    };
    b.forward(batch)?;
    Ok(TaintedTrace {
        model: cfg.name.clone(),
        backend: backend.name.clone(),
        options: *opts,
        batch,
        events: b.events,
        registry: b.reg,
        ambiguities: b.ambiguities,
        retraced_from: None,
    })
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    backend: &'a BackendSpec,
    phase: Phase,
    tp: u64,
    shard: Shard,
    reg: TaintRegistry,
    ambiguities: Vec<u64>,
    events: Vec<TraceEvent>,
    stack: Vec<usize>,
    tick: u64,
}

type Attrs = BTreeMap<String, AttrValue>;

fn attrs<const N: usize>(pairs: [(&str, AttrValue); N]) -> Attrs {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn int(v: u64) -> AttrValue {
    AttrValue::Int(v as i64)
}

fn mc(v: u64) -> TaintedDim {
    TaintedDim::mc(v)
}

fn mcv(v: u64) -> TaintedValue {
    TaintedValue::new(v, Taint::MC)
}

impl Builder<'_> {
    fn open(&mut self, category: Category, name: String, inputs: Vec<Shape>, scalars: Vec<TaintedValue>, attrs: Attrs) {
        let id = self.events.len();
        self.events.push(TraceEvent {
            id: id as u64,
            parent_id: self.stack.last().map(|p| *p as u64),
            category,
            name,
            begin: self.tick,
            end: self.tick,
            inputs,
            scalars,
            attrs,
            kernel_symbols: Vec::new(),
        });
        self.tick += 1;
        self.stack.push(id);
    }

    fn close(&mut self) {
        let id = self.stack.pop().expect("balanced open/close");
        self.events[id].end = self.tick;
        self.tick += 1;
    }

    fn module<R>(
        &mut self,
        name: &str,
        class: &str,
        inputs: Vec<Shape>,
        mut extra: Attrs,
        scalars: Vec<TaintedValue>,
        body: impl FnOnce(&mut Self) -> Result<R, TraceError>,
    ) -> Result<R, TraceError> {
        extra.insert(ATTR_CLASS.into(), AttrValue::Str(class.into()));
        self.open(Category::Module, name.into(), inputs, scalars, extra);
        let out = body(self)?;
        self.close();
        Ok(out)
    }

    fn note(&mut self, r: Registration) {
        if let Registration::AmbiguityDetected(v) = r {
            if !self.ambiguities.contains(&v) {
                self.ambiguities.push(v);
            }
        }
    }

    fn op(
        &mut self,
        kind: OpKind,
        inputs: Vec<Shape>,
        scalars: Vec<TaintedValue>,
        attrs: Attrs,
    ) -> Result<Shape, TraceError> {
        let sizes: Vec<Vec<u64>> = inputs.iter().map(|s| s.iter().map(|d| d.size).collect()).collect();
        let scalar_values: Vec<u64> = scalars.iter().map(|s| s.value).collect();
        let out_sizes = kind.shape_fn(&sizes, &scalar_values, &attrs)?;
        let out = match kind {
            OpKind::Reshape => {
                let target = parse_target(attrs["target"].as_str().unwrap_or_default())?;
                let mut amb = Vec::new();
                let r = map_dims(&MapOp::Reshape { target: &target }, &inputs[..1], &mut self.reg, &mut amb);
                for v in amb {
                    self.note(Registration::AmbiguityDetected(v));
                }
                r?
            }
            OpKind::Linear => preserve_dims(&PreserveKind::Matmul, &inputs, &self.reg)?,
            OpKind::RmsNorm | OpKind::AllReduce => preserve_dims(&PreserveKind::Elementwise, &inputs, &self.reg)?,
            OpKind::Rope => inputs[1].clone(),
            OpKind::Attention => inputs[0].clone(),
            OpKind::TopkRouter => {
                let sizes = [
                    TaintedValue::new(inputs[0][0].size, inputs[0][0].taint.clone()),
                    scalars[0].clone(),
                ];
                let mut amb = Vec::new();
                map_dims(&MapOp::Create { sizes: &sizes }, &[], &mut self.reg, &mut amb)?
            }
            OpKind::KvCacheWrite => Vec::new(),
            OpKind::Embedding | OpKind::SiluAndMul | OpKind::FusedMoe | OpKind::IndexSelect => {
                preserve_dims(&PreserveKind::Sized(&out_sizes), &inputs, &self.reg)?
            }
        };
        debug_assert_eq!(out.iter().map(|d| d.size).collect::<Vec<_>>(), out_sizes);

        let kernels: Vec<String> = if kind == OpKind::Attention {
            let kind_attr = attrs.get("sliding_window").and_then(AttrValue::as_int);
            let ak = match kind_attr {
                Some(w) => AttentionKind::Sliding { window: w as u64 },
                None => AttentionKind::Full,
            };
            let geometry = geometry_key_for(self.cfg, ak);
            self.backend
                .kernels(&geometry, self.phase)
                .ok_or_else(|| TraceError::MissingKernels {
                    backend: self.backend.name.clone(),
                    geometry,
                    phase: self.phase.as_str(),
                })?
                .to_vec()
        } else {
            kind.fixed_kernels().iter().map(|s| s.to_string()).collect()
        };

        if kind.is_collective() {
            // collectives are hooked as no-ops: zero duration
            let id = self.events.len();
            self.events.push(TraceEvent {
                id: id as u64,
                parent_id: self.stack.last().map(|p| *p as u64),
                category: Category::Operation,
                name: kind.op_name().into(),
                begin: self.tick,
                end: self.tick,
                inputs,
                scalars,
                attrs,
                kernel_symbols: Vec::new(),
            });
            self.tick += 1;
            return Ok(out);
        }

        self.open(Category::Operation, kind.op_name().into(), inputs, scalars, attrs);
        let me = *self.stack.last().expect("just opened");
        self.events[me].kernel_symbols = kernels.clone();
        for k in kernels {
            self.open(Category::Kernel, k, Vec::new(), Vec::new(), Attrs::new());
            self.close();
        }
        self.close();
        Ok(out)
    }

    fn reshape(&mut self, x: Shape, target: &[i64]) -> Result<Shape, TraceError> {
        // the explicit view sizes are scalar arguments of the call
        let scalars = target
            .iter()
            .filter(|v| **v > 0)
            .map(|v| {
                let v = *v as u64;
                TaintedValue::new(v, self.reg.lookup(v).cloned().unwrap_or_default())
            })
            .collect();
        self.op(
            OpKind::Reshape,
            vec![x],
            scalars,
            attrs([("target", AttrValue::Str(format_target(target)))]),
        )
    }

    fn linear(&mut self, name: &str, class: &str, x: Shape, out_features: u64) -> Result<Shape, TraceError> {
        let k = x.last().expect("linear input has a feature dim").clone();
        let in_features = k.size;
        self.module(
            name,
            class,
            vec![x.clone()],
            attrs([("input_size", int(in_features)), ("output_size", int(out_features))]),
            Vec::new(),
            |b| b.op(OpKind::Linear, vec![x, vec![k, mc(out_features)]], Vec::new(), Attrs::new()),
        )
    }

    fn norm(&mut self, name: &str, x: Shape) -> Result<Shape, TraceError> {
        let h = self.cfg.hidden_dim;
        self.module(
            name,
            "RMSNorm",
            vec![x.clone()],
            attrs([("hidden_size", int(h))]),
            Vec::new(),
            |b| b.op(OpKind::RmsNorm, vec![x.clone(), x, vec![mc(h)]], Vec::new(), Attrs::new()),
        )
    }

    fn all_reduce(&mut self, x: Shape) -> Result<Shape, TraceError> {
        if self.tp > 1 {
            self.op(OpKind::AllReduce, vec![x], vec![mcv(self.tp)], Attrs::new())
        } else {
            Ok(x)
        }
    }

    fn forward(&mut self, batch: DummyBatch) -> Result<(), TraceError> {
        let cfg = self.cfg;
        let t = TaintedDim::new(batch.total_tokens(), Taint::NT);
        let r = TaintedDim::new(batch.num_reqs, Taint::NR);
        let h = cfg.hidden_dim;
        let ids = vec![t.clone()];
        self.module("model", "DecoderModel", vec![ids.clone()], Attrs::new(), Vec::new(), |b| {
            let mut x = b.module(
                "model.embed_tokens",
                "VocabParallelEmbedding",
                vec![ids.clone()],
                attrs([("num_embeddings", int(cfg.vocab_size)), ("embedding_dim", int(h))]),
                Vec::new(),
                |b| b.op(OpKind::Embedding, vec![ids, vec![mc(cfg.vocab_size), mc(h)]], Vec::new(), Attrs::new()),
            )?;
            for (i, kind) in cfg.layer_attention.iter().enumerate() {
                x = b.layer(i, *kind, x, &t, &r)?;
            }
            x = b.norm("model.norm", x)?;
            b.module(
                "model.logits",
                "LogitsProcessor",
                vec![x.clone()],
                attrs([("vocab_size", int(cfg.vocab_size))]),
                Vec::new(),
                |b| {
                    let idx = vec![r.clone()];
                    let last = b.op(OpKind::IndexSelect, vec![x, idx], Vec::new(), Attrs::new())?;
                    b.linear("model.lm_head", "ParallelLMHead", last, b.shard.vocab)
                },
            )
        })?;
        Ok(())
    }

    fn layer(&mut self, i: usize, kind: AttentionKind, x: Shape, t: &TaintedDim, r: &TaintedDim) -> Result<Shape, TraceError> {
        let p = format!("model.layers.{i}");
        self.module(&p.clone(), "DecoderLayer", vec![x.clone()], Attrs::new(), Vec::new(), |b| {
            let x = b.norm(&format!("{p}.input_layernorm"), x)?;
            let x = b.self_attn(&format!("{p}.self_attn"), kind, x, t, r)?;
            let x = b.all_reduce(x)?;
            let x = b.norm(&format!("{p}.post_attention_layernorm"), x)?;
            let x = if b.cfg.moe.is_some() {
                b.moe(&format!("{p}.mlp"), x)?
            } else {
                b.mlp(&format!("{p}.mlp"), x)?
            };
            b.all_reduce(x)
        })
    }

    fn self_attn(&mut self, p: &str, kind: AttentionKind, x: Shape, t: &TaintedDim, r: &TaintedDim) -> Result<Shape, TraceError> {
        let cfg = self.cfg;
        let d = cfg.head_dim;
        let (hq, hkv) = (self.shard.q_heads, self.shard.kv_heads);
        self.module(p, "SelfAttention", vec![x.clone()], Attrs::new(), Vec::new(), |b| {
            let qkv = b.linear(&format!("{p}.qkv_proj"), "QKVParallelLinear", x, (hq + 2 * hkv) * d)?;
            // split is a view; each part keeps the token dim
            let tok = qkv[0].clone();
            let q = b.reshape(vec![tok.clone(), mc(hq * d)], &[-1, hq as i64, d as i64])?;
            let k = b.reshape(vec![tok.clone(), mc(hkv * d)], &[-1, hkv as i64, d as i64])?;
            let v = b.reshape(vec![tok, mc(hkv * d)], &[-1, hkv as i64, d as i64])?;
            let positions = vec![t.clone()];
            let q = b.module(
                &format!("{p}.rotary_emb"),
                "RotaryEmbedding",
                vec![positions.clone(), q.clone(), k.clone()],
                attrs([("head_size", int(d)), ("max_position_embeddings", int(cfg.max_context))]),
                Vec::new(),
                |b| b.op(OpKind::Rope, vec![positions, q, k.clone()], Vec::new(), Attrs::new()),
            )?;
            let mut scalars = vec![mcv(hq), mcv(hkv), mcv(d)];
            let mut module_attrs = attrs([
                (ATTR_STATEFUL, AttrValue::Str("attention".into())),
                ("num_heads", int(hq)),
                ("num_kv_heads", int(hkv)),
                ("head_size", int(d)),
                ("kv_cache_dtype", AttrValue::Str("auto".into())),
            ]);
            let mut op_attrs = Attrs::new();
            if let AttentionKind::Sliding { window } = kind {
                scalars.push(mcv(window));
                module_attrs.insert("sliding_window".into(), int(window));
                op_attrs.insert("sliding_window".into(), int(window));
            }
            let out = b.module(
                &format!("{p}.attn"),
                "Attention",
                vec![q.clone(), k.clone(), v.clone()],
                module_attrs,
                scalars.clone(),
                |b| {
                    let slots = vec![t.clone()];
                    b.op(OpKind::KvCacheWrite, vec![k.clone(), v.clone(), slots], Vec::new(), Attrs::new())?;
                    let seq_lens = vec![r.clone()];
                    b.op(OpKind::Attention, vec![q, k, v, seq_lens], scalars, op_attrs)
                },
            )?;
            let out = b.reshape(out, &[-1, (hq * d) as i64])?;
            b.linear(&format!("{p}.o_proj"), "RowParallelLinear", out, cfg.hidden_dim)
        })
    }

    fn mlp(&mut self, p: &str, x: Shape) -> Result<Shape, TraceError> {
        let i = self.shard.intermediate;
        let h = self.cfg.hidden_dim;
        self.module(p, "MLP", vec![x.clone()], Attrs::new(), Vec::new(), |b| {
            let gu = b.linear(&format!("{p}.gate_up_proj"), "MergedColumnParallelLinear", x, 2 * i)?;
            let act = b.module(&format!("{p}.act_fn"), "SiluAndMul", vec![gu.clone()], Attrs::new(), Vec::new(), |b| {
                b.op(OpKind::SiluAndMul, vec![gu], Vec::new(), Attrs::new())
            })?;
            b.linear(&format!("{p}.down_proj"), "RowParallelLinear", act, h)
        })
    }

    fn moe(&mut self, p: &str, x: Shape) -> Result<Shape, TraceError> {
        let moe = self.cfg.moe.clone().expect("moe layer needs moe config");
        let ei = self.shard.expert_intermediate.expect("sharded with moe config");
        let h = self.cfg.hidden_dim;
        let (e, k) = (moe.num_experts, moe.top_k);
        self.module(p, "MoE", vec![x.clone()], Attrs::new(), Vec::new(), |b| {
            let logits = b.linear(&format!("{p}.gate"), "ReplicatedLinear", x.clone(), e)?;
            let module_attrs = attrs([
                (ATTR_STATEFUL, AttrValue::Str("moe_dispatch".into())),
                ("num_experts", int(e)),
                ("top_k", int(k)),
                ("intermediate_size_per_partition", int(ei)),
                ("renormalize", AttrValue::Bool(true)),
            ]);
            let scalars = vec![mcv(e), mcv(k)];
            b.module(
                &format!("{p}.experts"),
                "FusedMoE",
                vec![x.clone(), logits.clone()],
                module_attrs,
                scalars,
                |b| {
                    let ids = b.op(OpKind::TopkRouter, vec![logits], vec![mcv(k)], Attrs::new())?;
                    let flat = b.reshape(ids, &[-1])?;
                    let w13 = vec![mc(e), mc(2 * ei), mc(h)];
                    let w2 = vec![mc(e), mc(h), mc(ei)];
                    let routed = b.op(
                        OpKind::FusedMoe,
                        vec![x.clone(), w13, w2, flat],
                        vec![mcv(k)],
                        Attrs::new(),
                    )?;
                    let per_token = b.reshape(routed, &[-1, k as i64, h as i64])?;
                    Ok(vec![per_token[0].clone(), per_token[2].clone()])
                },
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{backend, llama31_8b};

    #[test]
    fn seeds_match_labels() {
        let cfg = llama31_8b();
        let batch = DummyBatch { num_reqs: 2, tokens_per_req: 269 };
        let (reg, amb) = seed_sources(&cfg, &batch, 1);
        assert!(amb.is_empty());
        assert_eq!(reg.lookup(4096), Some(&Taint::MC));
        assert_eq!(reg.lookup(8), Some(&Taint::MC));
        assert_eq!(reg.lookup(2), Some(&Taint::NR));
        assert_eq!(reg.lookup(269), Some(&Taint::NT));
        assert_eq!(reg.lookup(538), Some(&Taint::NT));
    }

    #[test]
    fn kv_head_collision() {
        let cfg = llama31_8b();
        let (_, amb) = seed_sources(&cfg, &DummyBatch { num_reqs: 8, tokens_per_req: 269 }, 1);
        assert_eq!(amb, vec![8]);
    }

    #[test]
    fn unit_batch_is_clean() {
        let cfg = llama31_8b();
        let (_, amb) = seed_sources(&cfg, &DummyBatch { num_reqs: 1, tokens_per_req: 1 }, 1);
        assert!(amb.is_empty());
    }

    #[test]
    fn qkv_input_dims() {
        let cfg = llama31_8b();
        let be = backend("flashinfer", std::slice::from_ref(&cfg));
        let tr = run_trace(&cfg, &be, DummyBatch { num_reqs: 2, tokens_per_req: 269 }, &TraceOptions::default()).unwrap();
        let qkv = tr
            .events
            .iter()
            .find(|e| e.name == "model.layers.0.self_attn.qkv_proj")
            .unwrap();
        assert_eq!(qkv.inputs[0], vec![TaintedDim::new(538, Taint::NT), TaintedDim::mc(4096)]);
        let layers = tr
            .events
            .iter()
            .filter(|e| e.attr_str(ATTR_CLASS) == Some("DecoderLayer"))
            .count();
        assert_eq!(layers, 32);
    }

    #[test]
    fn collision_free_skips_model_values() {
        let mut cfg = llama31_8b();
        cfg.num_kv_heads = 2;
        cfg.num_q_heads = 32;
        let b = DummyBatch::collision_free(&cfg, 1, &BTreeSet::new());
        assert_eq!(b, DummyBatch { num_reqs: 3, tokens_per_req: 269 });
    }

    #[test]
    fn shape_fn_rejects_bad_linear() {
        let e = OpKind::Linear.shape_fn(&[vec![4, 10], vec![11, 3]], &[], &Attrs::new());
        assert!(e.is_err());
        assert_eq!(OpKind::Linear.shape_fn(&[vec![4, 10], vec![10, 3]], &[], &Attrs::new()).unwrap(), vec![4, 3]);
    }
}
