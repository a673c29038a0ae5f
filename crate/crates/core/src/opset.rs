//! Minimal runnable operation set.
//!
//! A trace is turned into a call tree by interval containment, identical
//! sibling subtrees are collapsed, and the tree is resolved bottom-up into
//! operator-level entries where an op runs standalone and module-level entries
//! where a stateful module must supply engine context.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::modelir::Phase;
use crate::taint::{Taint, TaintLabel, TaintedValue};
use crate::tracer::{
    AttrValue, Category, OpKind, Shape, TaintedTrace, TraceEvent, ATTR_CLASS, ATTR_STATEFUL,
};

#[derive(Debug, thiserror::Error)]
pub enum OpsetError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("no engine context for {0}")]
    ContextUnavailable(String),
    #[error("cannot resolve {0}: no runnable ancestor")]
    Unresolvable(String),
}

/// Stateful module kinds the engine can build context for.
pub const STATEFUL_KINDS: [&str; 3] = ["attention", "moe_dispatch", "mamba"];

/// Small verification point for runnability checks.
pub const VERIFY_TOKS: u64 = 4;
pub const VERIFY_REQS: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallNode {
    pub event: TraceEvent,
    pub children: Vec<usize>,
    pub fingerprint: [u8; 32],
    /// Number of identical sibling instances this node stands for.
    pub repeat: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CallTree {
    pub nodes: Vec<CallNode>,
    pub roots: Vec<usize>,
}

/// Build the hierarchy from event intervals.
pub fn build_tree(trace: &TaintedTrace) -> Result<CallTree, OpsetError> {
    CallTree::from_events(&trace.events)
}

impl CallTree {
    pub fn from_events(events: &[TraceEvent]) -> Result<CallTree, OpsetError> {
        let mut order: Vec<usize> = (0..events.len()).collect();
        order.sort_by_key(|&i| (events[i].begin, std::cmp::Reverse(events[i].end), i));
        for e in events {
            if e.end < e.begin {
                return Err(OpsetError::MalformedTrace(format!("event {} ends before it begins", e.id)));
            }
        }
        let mut nodes: Vec<CallNode> = Vec::with_capacity(events.len());
        let mut roots = Vec::new();
        let mut stack: Vec<usize> = Vec::new();
        for &i in &order {
            let e = &events[i];
            while let Some(&top) = stack.last() {
                let t = &nodes[top].event;
                if t.begin <= e.begin && e.end <= t.end {
                    break;
                }
                if t.end <= e.begin || (t.begin == t.end && t.end == e.begin) {
                    stack.pop();
                } else {
                    return Err(OpsetError::MalformedTrace(format!(
                        "{} [{}, {}] overlaps {} [{}, {}]",
                        e.name, e.begin, e.end, t.name, t.begin, t.end
                    )));
                }
            }
            let id = nodes.len();
            nodes.push(CallNode {
                event: e.clone(),
                children: Vec::new(),
                fingerprint: [0; 32],
                repeat: 1,
            });
            match stack.last() {
                Some(&p) => nodes[p].children.push(id),
                None => roots.push(id),
            }
            stack.push(id);
        }
        let mut tree = CallTree { nodes, roots };
        for r in tree.roots.clone() {
            tree.fingerprint(r);
        }
        Ok(tree)
    }

    fn fingerprint(&mut self, id: usize) -> [u8; 32] {
        for c in self.nodes[id].children.clone() {
            self.fingerprint(c);
        }
        let n = &self.nodes[id];
        let mut h = Sha256::new();
        h.update(normalize_name(&n.event.name).as_bytes());
        h.update([0, n.event.category as u8]);
        for shape in &n.event.inputs {
            h.update([1]);
            for d in shape {
                structural_value(&mut h, d.size, &d.taint);
            }
        }
        for s in &n.event.scalars {
            h.update([2]);
            structural_value(&mut h, s.value, &s.taint);
        }
        for (k, v) in &n.event.attrs {
            h.update([3]);
            h.update(k.as_bytes());
            h.update(format!("={v:?}").as_bytes());
        }
        for k in &n.event.kernel_symbols {
            h.update([4]);
            h.update(k.as_bytes());
        }
        for c in &n.children {
            h.update([5]);
            h.update(self.nodes[*c].fingerprint);
        }
        let fp: [u8; 32] = h.finalize().into();
        self.nodes[id].fingerprint = fp;
        fp
    }

    /// Effective multiplicity of every node: product of repeats on its path.
    pub fn multiplicities(&self) -> Vec<u64> {
        let mut m = vec![0; self.nodes.len()];
        let mut stack: Vec<(usize, u64)> = self.roots.iter().map(|r| (*r, self.nodes[*r].repeat)).collect();
        while let Some((id, mult)) = stack.pop() {
            m[id] = mult;
            for c in &self.nodes[id].children {
                stack.push((*c, mult * self.nodes[*c].repeat));
            }
        }
        m
    }

    /// Kernel launches represented by the tree, counting repeats.
    pub fn kernel_count(&self) -> u64 {
        let m = self.multiplicities();
        self.nodes
            .iter()
            .zip(m)
            .filter(|(n, _)| n.event.category == Category::Kernel)
            .map(|(_, k)| k)
            .sum()
    }

    fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack: Vec<usize> = self.roots.iter().rev().copied().collect();
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.nodes[id].children.iter().rev());
        }
        out
    }
}

fn normalize_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut in_digits = false;
    for ch in name.chars() {
        if ch.is_ascii_digit() {
            if !in_digits {
                out.push('#');
            }
            in_digits = true;
        } else {
            out.push(ch);
            in_digits = false;
        }
    }
    out
}

/// Structural content of a tainted value: model-config values count,
/// workload values do not.
fn structural_value(h: &mut Sha256, value: u64, taint: &Taint) {
    match taint {
        Taint::Base(l) if l.is_workload() => h.update(l.code()),
        Taint::Mix(m) => {
            h.update(b"MIX");
            for l in taint.labels() {
                h.update(l.code());
            }
            h.update(m.model_product().to_le_bytes());
        }
        _ => {
            h.update(taint.to_string());
            h.update(value.to_le_bytes());
        }
    }
    h.update(b";");
}

/// Collapse identical sibling subtrees into one representative.
pub fn prune(tree: &CallTree) -> CallTree {
    let mut keep = vec![false; tree.nodes.len()];
    let mut repeat = vec![1u64; tree.nodes.len()];
    fn group(tree: &CallTree, ids: &[usize], keep: &mut [bool], repeat: &mut [u64]) {
        let mut first: BTreeMap<[u8; 32], usize> = BTreeMap::new();
        for &id in ids {
            match first.get(&tree.nodes[id].fingerprint) {
                Some(&rep) => repeat[rep] += tree.nodes[id].repeat,
                None => {
                    first.insert(tree.nodes[id].fingerprint, id);
                    keep[id] = true;
                    repeat[id] = tree.nodes[id].repeat;
                    group(tree, &tree.nodes[id].children, keep, repeat);
                }
            }
        }
    }
    group(tree, &tree.roots, &mut keep, &mut repeat);

    let mut remap = vec![usize::MAX; tree.nodes.len()];
    let mut nodes = Vec::new();
    for id in tree.preorder() {
        if keep[id] {
            remap[id] = nodes.len();
            let mut n = tree.nodes[id].clone();
            n.repeat = repeat[id];
            nodes.push(n);
        }
    }
    for n in &mut nodes {
        n.children = n.children.iter().filter(|c| keep[**c]).map(|c| remap[*c]).collect();
    }
    let roots = tree.roots.iter().filter(|r| keep[**r]).map(|r| remap[*r]).collect();
    CallTree { nodes, roots }
}

/// One op inside a runnable entry, kept for cost evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberOp {
    pub kind: OpKind,
    pub inputs: Vec<Shape>,
    pub scalars: Vec<TaintedValue>,
    pub attrs: BTreeMap<String, AttrValue>,
    pub kernel_symbols: Vec<String>,
}

impl MemberOp {
    fn from_event(e: &TraceEvent) -> Option<MemberOp> {
        Some(MemberOp {
            kind: e.op_kind()?,
            inputs: e.inputs.clone(),
            scalars: e.scalars.clone(),
            attrs: e.attrs.clone(),
            kernel_symbols: e.kernel_symbols.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Operator,
    Module,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnableEntry {
    pub granularity: Granularity,
    /// Op name for operators, module class for modules.
    pub name: String,
    /// Trace path of the representative instance.
    pub path: String,
    pub inputs: Vec<Shape>,
    pub scalars: Vec<TaintedValue>,
    pub context_required: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, AttrValue>,
    pub kernel_symbols: Vec<String>,
    pub repeat_count: u64,
    /// Kernel launches covered by one instance.
    pub covered_kernels: u64,
    pub members: Vec<MemberOp>,
}

impl RunnableEntry {
    pub fn stateful_kind(&self) -> Option<&str> {
        self.attrs.get(ATTR_STATEFUL).and_then(AttrValue::as_str)
    }

    /// Workload labels the entry's inputs depend on.
    pub fn workload_labels(&self) -> BTreeSet<TaintLabel> {
        self.inputs
            .iter()
            .flatten()
            .map(|d| &d.taint)
            .chain(self.scalars.iter().map(|s| &s.taint))
            .flat_map(Taint::labels)
            .filter(|l| l.is_workload())
            .collect()
    }
}

/// A collective call; priced by the communication table, not profiled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveEntry {
    pub kind: OpKind,
    pub path: String,
    pub inputs: Vec<Shape>,
    pub repeat_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnableSet {
    pub model: String,
    pub backend: String,
    pub tp: u64,
    pub entries: Vec<RunnableEntry>,
    pub collectives: Vec<CollectiveEntry>,
}

impl RunnableSet {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("runnable set serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn covered_kernels(&self) -> u64 {
        self.entries.iter().map(|e| e.covered_kernels * e.repeat_count).sum()
    }
}

/// Per-model engine state for stateful modules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineContext {
    pub backend: String,
    /// Module path → stage-1 state.
    pub stage1: BTreeMap<String, Stage1>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage1 {
    pub kind: String,
    pub kv_cache_layout: String,
    pub metadata_builder: String,
}

/// A concrete workload point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WorkloadPoint {
    pub num_toks: u64,
    pub num_reqs: u64,
    pub phase: Phase,
    pub chunk: u64,
    pub kv_len: u64,
}

impl WorkloadPoint {
    pub fn verify() -> Self {
        Self {
            num_toks: VERIFY_TOKS,
            num_reqs: VERIFY_REQS,
            phase: Phase::Prefill,
            chunk: VERIFY_TOKS,
            kv_len: 0,
        }
    }
}

/// Stage-2 metadata for one workload point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage2 {
    pub phase: Phase,
    pub batch_size: u64,
    /// New tokens per request.
    pub query_lens: Vec<u64>,
    /// Total context (cached + new) per request.
    pub seq_lens: Vec<u64>,
    pub slot_mapping: Vec<u64>,
}

impl EngineContext {
    /// Stage 1: one state per stateful module of the trace.
    pub fn init(trace: &TaintedTrace) -> EngineContext {
        let stage1 = trace
            .events
            .iter()
            .filter(|e| e.category == Category::Module)
            .filter_map(|e| {
                let kind = e.attr_str(ATTR_STATEFUL)?;
                STATEFUL_KINDS.contains(&kind).then(|| {
                    let s = Stage1 {
                        kind: kind.to_string(),
                        kv_cache_layout: if kind == "attention" { "paged(block_size=16)" } else { "none" }.into(),
                        metadata_builder: format!("{}::{}", trace.backend, kind),
                    };
                    (normalize_name(&e.name), s)
                })
            })
            .collect();
        EngineContext {
            backend: trace.backend.clone(),
            stage1,
        }
    }

    fn has(&self, path: &str) -> bool {
        self.stage1.contains_key(&normalize_name(path))
    }
}

/// Stage 2 for a context-dependent entry at a workload point.
pub fn emulate_context(entry: &RunnableEntry, engine: &EngineContext, point: &WorkloadPoint) -> Result<Stage2, OpsetError> {
    if !entry.context_required || !engine.has(&entry.path) {
        return Err(OpsetError::ContextUnavailable(entry.path.clone()));
    }
    Ok(stage2(point))
}

/// Prefill splits `num_toks` evenly over at most `num_reqs` requests; decode
/// gives each request one new token. Every request has `kv_len` cached.
pub fn stage2(point: &WorkloadPoint) -> Stage2 {
    let query_lens = match point.phase {
        Phase::Prefill => {
            let reqs = point.num_reqs.min(point.num_toks).max(1);
            let (q, r) = (point.num_toks / reqs, point.num_toks % reqs);
            (0..reqs).map(|i| q + u64::from(i < r)).collect()
        }
        Phase::Decode => vec![1; point.num_reqs as usize],
    };
    let seq_lens: Vec<u64> = query_lens.iter().map(|q| q + point.kv_len).collect();
    let total: u64 = query_lens.iter().sum();
    Stage2 {
        phase: point.phase,
        batch_size: query_lens.len() as u64,
        query_lens,
        seq_lens,
        slot_mapping: (0..total).collect(),
    }
}

/// Concrete input sizes for a template at a workload point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSpec {
    pub inputs: Vec<Vec<u64>>,
    pub scalars: Vec<u64>,
}

fn concrete(value: u64, taint: &Taint, subs: &BTreeMap<TaintLabel, u64>) -> u64 {
    match taint {
        Taint::Bot => value,
        Taint::Base(l) => subs.get(l).copied().unwrap_or(value),
        Taint::Mix(m) => m.reevaluate(subs).0,
    }
}

fn subs_for(point: &WorkloadPoint) -> BTreeMap<TaintLabel, u64> {
    BTreeMap::from([(TaintLabel::NumToks, point.num_toks), (TaintLabel::NumReqs, point.num_reqs)])
}

pub fn generate(inputs: &[Shape], scalars: &[TaintedValue], point: &WorkloadPoint) -> InputSpec {
    let subs = subs_for(point);
    InputSpec {
        inputs: inputs
            .iter()
            .map(|s| s.iter().map(|d| concrete(d.size, &d.taint, &subs)).collect())
            .collect(),
        scalars: scalars.iter().map(|s| concrete(s.value, &s.taint, &subs)).collect(),
    }
}

/// Inputs for an entry: model-config dims fixed, workload dims from the point,
/// Mix dims recomputed, untainted dims unchanged.
pub fn generate_inputs(entry: &RunnableEntry, point: &WorkloadPoint) -> InputSpec {
    generate(&entry.inputs, &entry.scalars, point)
}

/// Import-and-run test at the small verification point.
pub fn is_runnable(node: &CallNode, children: &[&CallNode], ctx: Option<&EngineContext>) -> bool {
    let point = WorkloadPoint::verify();
    let dry = |e: &TraceEvent| {
        let Some(kind) = e.op_kind() else { return false };
        let spec = generate(&e.inputs, &e.scalars, &point);
        kind.shape_fn(&spec.inputs, &spec.scalars, &e.attrs).is_ok()
    };
    match node.event.category {
        Category::Operation => match node.event.op_kind() {
            Some(k) if !k.is_context_dependent() => dry(&node.event),
            _ => false,
        },
        Category::Module => {
            let stateful = node
                .event
                .attr_str(ATTR_STATEFUL)
                .is_some_and(|k| STATEFUL_KINDS.contains(&k));
            stateful
                && ctx.is_some_and(|c| c.has(&node.event.name))
                && children
                    .iter()
                    .all(|c| c.event.category != Category::Operation || dry(&c.event))
        }
        Category::Kernel => false,
    }
}

enum Partial {
    Done,
    /// Unresolved node ids waiting for an ancestor.
    Pending(Vec<usize>),
}

/// Resolve a pruned tree into the runnable set.
pub fn resolve(tree: &CallTree, trace: &TaintedTrace, engine: &EngineContext) -> Result<RunnableSet, OpsetError> {
    let mult = tree.multiplicities();
    let mut set = RunnableSet {
        model: trace.model.clone(),
        backend: trace.backend.clone(),
        tp: trace.options.tp,
        entries: Vec::new(),
        collectives: Vec::new(),
    };
    for &r in &tree.roots {
        if let Partial::Pending(ids) = walk(tree, r, "", engine, &mult, &mut set) {
            let names: Vec<&str> = ids.iter().map(|i| tree.nodes[*i].event.name.as_str()).collect();
            return Err(OpsetError::Unresolvable(names.join(", ")));
        }
    }
    Ok(set)
}

fn subtree_kernels(tree: &CallTree, id: usize, out: &mut Vec<String>, count: &mut u64, base: u64) {
    let n = &tree.nodes[id];
    if n.event.category == Category::Kernel {
        if !out.contains(&n.event.name) {
            out.push(n.event.name.clone());
        }
        *count += base;
    }
    for c in &n.children {
        subtree_kernels(tree, *c, out, count, base * tree.nodes[*c].repeat);
    }
}

fn subtree_ops(tree: &CallTree, id: usize, out: &mut Vec<MemberOp>, base: u64) {
    let n = &tree.nodes[id];
    if let Some(m) = MemberOp::from_event(&n.event) {
        out.extend(std::iter::repeat_n(m, base as usize));
    }
    for c in &n.children {
        subtree_ops(tree, *c, out, base * tree.nodes[*c].repeat);
    }
}

fn op_path(module: &str, op: &str) -> String {
    if module.is_empty() {
        op.to_string()
    } else {
        format!("{module}/{op}")
    }
}

/// `module` is the name of the innermost enclosing module.
fn walk(tree: &CallTree, id: usize, module: &str, engine: &EngineContext, mult: &[u64], set: &mut RunnableSet) -> Partial {
    let node = &tree.nodes[id];
    match node.event.category {
        Category::Kernel => Partial::Pending(vec![id]),
        Category::Operation => {
            let kind = node.event.op_kind();
            if kind.is_some_and(OpKind::is_collective) {
                set.collectives.push(CollectiveEntry {
                    kind: kind.expect("checked"),
                    path: op_path(module, &node.event.name),
                    inputs: node.event.inputs.clone(),
                    repeat_count: mult[id],
                });
                return Partial::Done;
            }
            if !is_runnable(node, &[], None) {
                return Partial::Pending(vec![id]);
            }
            let mut kernels = Vec::new();
            let mut count = 0;
            subtree_kernels(tree, id, &mut kernels, &mut count, 1);
            let member = MemberOp::from_event(&node.event).expect("runnable ops have a kind");
            set.entries.push(RunnableEntry {
                granularity: Granularity::Operator,
                name: node.event.name.clone(),
                path: op_path(module, &node.event.name),
                inputs: node.event.inputs.clone(),
                scalars: node.event.scalars.clone(),
                context_required: false,
                attrs: BTreeMap::new(),
                kernel_symbols: kernels,
                repeat_count: mult[id],
                covered_kernels: count,
                members: vec![member],
            });
            Partial::Done
        }
        Category::Module => {
            // children are emitted in order; pending ones are collected
            let mut pending = Vec::new();
            let mut slot = set.entries.len();
            for &c in &node.children {
                if let Partial::Pending(ids) = walk(tree, c, &node.event.name, engine, mult, set) {
                    if pending.is_empty() {
                        slot = set.entries.len();
                    }
                    pending.extend(ids);
                }
            }
            if pending.is_empty() {
                return Partial::Done;
            }
            let failing: Vec<&CallNode> = pending.iter().map(|i| &tree.nodes[*i]).collect();
            if !is_runnable(node, &failing, Some(engine)) {
                return Partial::Pending(pending);
            }
            let mut kernels = Vec::new();
            let mut count = 0;
            let mut members = Vec::new();
            for &p in &pending {
                subtree_kernels(tree, p, &mut kernels, &mut count, tree.nodes[p].repeat);
                subtree_ops(tree, p, &mut members, tree.nodes[p].repeat);
            }
            let class = node.event.attr_str(ATTR_CLASS).unwrap_or(&node.event.name).to_string();
            set.entries.insert(
                slot,
                RunnableEntry {
                    granularity: Granularity::Module,
                    name: class,
                    path: node.event.name.clone(),
                    inputs: node.event.inputs.clone(),
                    scalars: node.event.scalars.clone(),
                    context_required: true,
                    attrs: node.event.attrs.clone(),
                    kernel_symbols: kernels,
                    repeat_count: mult[id],
                    covered_kernels: count,
                    members,
                },
            );
            Partial::Done
        }
    }
}

/// Trace → pruned tree → runnable set.
pub fn find_opset(trace: &TaintedTrace) -> Result<RunnableSet, OpsetError> {
    let tree = prune(&build_tree(trace)?);
    let engine = EngineContext::init(trace);
    resolve(&tree, trace, &engine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{backend, command_r7b, llama31_8b};
    use crate::tracer::TaintedDim;
    use crate::tracer::{run_trace, DummyBatch, TraceOptions};

    fn ev(id: u64, begin: u64, end: u64) -> TraceEvent {
        TraceEvent {
            id,
            parent_id: None,
            category: Category::Module,
            name: format!("m{id}"),
            begin,
            end,
            inputs: vec![],
            scalars: vec![],
            attrs: BTreeMap::new(),
            kernel_symbols: vec![],
        }
    }

    #[test]
    fn containment_builds_parentage() {
        let t = CallTree::from_events(&[ev(0, 0, 10), ev(1, 2, 5), ev(2, 6, 8)]).unwrap();
        assert_eq!(t.roots, vec![0]);
        assert_eq!(t.nodes[0].children, vec![1, 2]);
        assert!(CallTree::from_events(&[]).unwrap().nodes.is_empty());
    }

    #[test]
    fn overlap_is_malformed() {
        let e = CallTree::from_events(&[ev(0, 0, 10), ev(1, 2, 12)]);
        assert!(matches!(e, Err(OpsetError::MalformedTrace(_))));
    }

    #[test]
    fn mix_reevaluates_at_one_token() {
        let dim = TaintedDim::new(10760, "MIX{40:MC,269:NT}".parse().unwrap());
        let p = WorkloadPoint { num_toks: 1, ..WorkloadPoint::verify() };
        let spec = generate(&[vec![dim, TaintedDim::mc(4096), TaintedDim::new(1, Taint::Bot)]], &[], &p);
        assert_eq!(spec.inputs[0], vec![40, 4096, 1]);
    }

    fn trace(cfg: &crate::ModelConfig) -> TaintedTrace {
        let be = backend("flashinfer", std::slice::from_ref(cfg));
        run_trace(cfg, &be, DummyBatch { num_reqs: 2, tokens_per_req: 269 }, &TraceOptions::default()).unwrap()
    }

    #[test]
    fn layers_collapse() {
        let tr = trace(&llama31_8b());
        let tree = prune(&build_tree(&tr).unwrap());
        let model = &tree.nodes[tree.roots[0]];
        let reps: Vec<u64> = model.children.iter().map(|c| tree.nodes[*c].repeat).collect();
        assert_eq!(reps, vec![1, 32, 1, 1]);
        assert_eq!(tree.kernel_count(), tr.kernel_count() as u64);
        assert_eq!(prune(&tree), tree);
    }

    #[test]
    fn interleaved_swa_keeps_two_layer_kinds() {
        let tree = prune(&build_tree(&trace(&command_r7b())).unwrap());
        let model = &tree.nodes[tree.roots[0]];
        let mut reps: Vec<u64> = model.children.iter().map(|c| tree.nodes[*c].repeat).collect();
        reps.sort();
        assert_eq!(reps, vec![1, 1, 1, 8, 24]);
    }

    #[test]
    fn attention_module_absorbs_its_kernels() {
        let tr = trace(&llama31_8b());
        let set = find_opset(&tr).unwrap();
        let modules: Vec<_> = set.entries.iter().filter(|e| e.granularity == Granularity::Module).collect();
        assert_eq!(modules.len(), 1);
        assert_eq!(modules[0].name, "Attention");
        assert_eq!(modules[0].covered_kernels, 3);
        assert_eq!(modules[0].repeat_count, 32);
        assert_eq!(set.covered_kernels(), tr.kernel_count() as u64);
    }

    #[test]
    fn context_only_for_stateful_entries() {
        let tr = trace(&llama31_8b());
        let engine = EngineContext::init(&tr);
        let set = find_opset(&tr).unwrap();
        let linear = set.entries.iter().find(|e| e.name == "aten::linear").unwrap();
        let p = WorkloadPoint { num_toks: 2048, num_reqs: 1, phase: Phase::Prefill, chunk: 8192, kv_len: 0 };
        assert!(matches!(emulate_context(linear, &engine, &p), Err(OpsetError::ContextUnavailable(_))));
        let attn = set.entries.iter().find(|e| e.context_required).unwrap();
        let s = emulate_context(attn, &engine, &p).unwrap();
        assert_eq!(s.seq_lens, vec![2048]);
        let d = stage2(&WorkloadPoint { num_toks: 64, num_reqs: 64, phase: Phase::Decode, chunk: 8192, kv_len: 512 });
        assert_eq!(d.batch_size, 64);
        assert!(d.seq_lens.iter().all(|s| *s == 513));
    }
}
