//! Serving simulation: per-signature regressors, a continuous-batching
//! scheduler and a discrete-event loop that prices each iteration by walking
//! the model's runnable set.

pub mod metrics;
pub mod regress;
pub mod sched;

use std::collections::{BTreeMap, VecDeque};

use crate::modelir::{BackendSpec, HardwareSpec, ModelConfig, Phase, Request};
use crate::opset::{CollectiveEntry, RunnableEntry, Stage2};
use crate::profiler::{
    comm_latency, runnable_set, sign_entries, signature::hex, CostModel, DbError, Hash, LatencyDb, ProfileError,
};

pub use metrics::{mape, percentile, MapeError, Metrics, RequestMetrics};
pub use regress::{
    classify, fit_signature, EntryClass, FitError, Prediction, Regressor, Regressors, UnknownSignature,
};
pub use sched::{complete_step, schedule_step, IterationBatch, SchedConfig, Scheduled, SchedulerState};

/// Iteration cap multiplier: a run may take at most this many iterations per
/// scheduled token before it is declared stuck.
const ITERATION_GUARD: u64 = 4;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("{entry}: {source}")]
    UnknownSignature { entry: String, source: UnknownSignature },
    #[error("{} signatures have no measurements: {}", .0.len(), .0.iter().map(|(n, h)| format!("{n} ({h})")).collect::<Vec<_>>().join(", "))]
    MissingSignatures(Vec<(String, String)>),
    #[error("no all_reduce measurements at tp={tp}")]
    MissingComm { tp: u64 },
    #[error("request {id} needs {need} KV bytes but the budget is {budget}")]
    RequestTooLarge { id: usize, need: u64, budget: u64 },
    #[error("request {0} has no prompt or no output tokens")]
    EmptyRequest(usize),
    #[error("workload is not sorted by arrival at request {0}")]
    Unsorted(usize),
    #[error("no termination after {iterations} iterations ({waiting} waiting, {running} running, clock {clock:.3} s)")]
    NonTermination {
        iterations: u64,
        waiting: usize,
        running: usize,
        clock: f64,
    },
}

#[derive(Debug, Clone)]
pub struct GraphEntry {
    pub hash: Hash,
    pub class: EntryClass,
    pub repeat_count: u64,
    pub entry: RunnableEntry,
}

/// The deduplicated call graph of one configuration.
#[derive(Debug, Clone)]
pub struct CallGraph {
    pub model: ModelConfig,
    pub backend: BackendSpec,
    pub tp: u64,
    pub entries: Vec<GraphEntry>,
    pub collectives: Vec<CollectiveEntry>,
}

impl CallGraph {
    pub fn build(model: &ModelConfig, backend: &BackendSpec, tp: u64) -> Result<Self, SimError> {
        let (set, _) = runnable_set(model, backend, tp)?;
        let entries = sign_entries(&set)
            .into_iter()
            .map(|s| GraphEntry {
                hash: s.signature.hash,
                class: classify(&s.entry),
                repeat_count: s.repeat_count,
                entry: s.entry,
            })
            .collect();
        Ok(Self {
            model: model.clone(),
            backend: backend.clone(),
            tp,
            entries,
            collectives: set.collectives,
        })
    }

    /// Payload bytes per token of each collective, with its repeat count.
    fn collective_bytes(&self) -> Vec<(u64, u64)> {
        self.collectives
            .iter()
            .map(|c| {
                let per_token: u64 = c.inputs.iter().flatten().skip(1).map(|d| d.size).product();
                (per_token * self.model.dtype_bytes, c.repeat_count)
            })
            .collect()
    }
}

/// Split a batch into per-phase stage-2 metadata.
pub fn phase_contexts(batch: &IterationBatch) -> Vec<Stage2> {
    let mut out = Vec::new();
    for (phase, part) in [(Phase::Prefill, &batch.prefill), (Phase::Decode, &batch.decode)] {
        if part.is_empty() {
            continue;
        }
        let query_lens: Vec<u64> = part.iter().map(|s| s.tokens).collect();
        let seq_lens = part.iter().map(|s| s.kv_before + s.tokens).collect();
        let total = query_lens.iter().sum();
        out.push(Stage2 {
            phase,
            batch_size: part.len() as u64,
            query_lens,
            seq_lens,
            slot_mapping: (0..total).collect(),
        });
    }
    out
}

/// Prices one iteration.
pub trait IterLatency {
    fn iter_latency(&mut self, batch: &IterationBatch) -> Result<f64, SimError>;
}

/// Regression-backed pricing, the simulator proper.
pub struct RegressionModel<'a> {
    pub graph: &'a CallGraph,
    pub regs: &'a Regressors,
    pub chunk: u64,
    comm: Option<regress::GridInterp<f64>>,
    pub extrapolations: u64,
}

impl<'a> RegressionModel<'a> {
    /// `comm_table` is `(bytes, seconds)` for the graph's topology and tp.
    pub fn new(graph: &'a CallGraph, regs: &'a Regressors, chunk: u64, comm_table: &[(u64, f64)]) -> Result<Self, SimError> {
        let comm = if graph.tp > 1 && !graph.collectives.is_empty() {
            let pts: BTreeMap<Vec<u64>, f64> = comm_table.iter().map(|(b, l)| (vec![*b], *l)).collect();
            Some(regress::GridInterp::from_points(&pts).filter(|_| pts.len() >= 2).ok_or(SimError::MissingComm { tp: graph.tp })?)
        } else {
            None
        };
        for e in &graph.entries {
            regs.get(&e.hash).map_err(|source| SimError::UnknownSignature {
                entry: e.entry.path.clone(),
                source,
            })?;
        }
        Ok(Self {
            graph,
            regs,
            chunk,
            comm,
            extrapolations: 0,
        })
    }

    fn predict(&mut self, e: &GraphEntry, x: &[f64], phase: Phase) -> Result<f64, SimError> {
        let p = self.regs.predict(&e.hash, x, phase).map_err(|source| SimError::UnknownSignature {
            entry: e.entry.path.clone(),
            source,
        })?;
        self.extrapolations += u64::from(p.extrapolated);
        Ok(p.seconds)
    }
}

impl IterLatency for RegressionModel<'_> {
    fn iter_latency(&mut self, batch: &IterationBatch) -> Result<f64, SimError> {
        let toks = batch.num_tokens();
        let reqs = batch.num_reqs();
        let ctxs = phase_contexts(batch);
        let graph = self.graph;
        let mut total = 0.0;
        for e in &graph.entries {
            let one = match e.class {
                EntryClass::Attention => {
                    let kvb = regress::kv_token_bytes(&e.entry, graph.model.dtype_bytes);
                    let mut s = 0.0;
                    for c in &ctxs {
                        let x: [f64; 4] = regress::attention_features(c, self.chunk, kvb);
                        s += self.predict(e, &x, c.phase)?;
                    }
                    s
                }
                EntryClass::TokenModule => self.predict(e, &[toks as f64], Phase::Prefill)?,
                EntryClass::Stateless => {
                    let names = &self.regs.get(&e.hash).expect("checked in new").feature_names;
                    let x: Vec<f64> = names
                        .iter()
                        .map(|n| if n == "num_reqs" { reqs as f64 } else { toks as f64 })
                        .collect();
                    self.predict(e, &x, Phase::Prefill)?
                }
            };
            total += e.repeat_count as f64 * one;
        }
        if let Some(comm) = &self.comm {
            for (per_token, repeat) in graph.collective_bytes() {
                total += repeat as f64 * comm.eval(&[(per_token * toks) as f64]).0;
            }
        }
        Ok(total)
    }
}

/// Brute-force pricing: every entry evaluated directly against the oracle at
/// the batch's concrete dims.
pub struct ReferenceModel<'a> {
    pub graph: &'a CallGraph,
    pub hw: &'a HardwareSpec,
}

impl IterLatency for ReferenceModel<'_> {
    fn iter_latency(&mut self, batch: &IterationBatch) -> Result<f64, SimError> {
        let g = self.graph;
        let cost = CostModel {
            model: &g.model,
            backend: &g.backend,
            hw: self.hw,
        };
        let toks = batch.num_tokens();
        let reqs = batch.num_reqs();
        let ctxs = phase_contexts(batch);
        let mut total = 0.0;
        for e in &g.entries {
            let one = match e.class {
                EntryClass::Attention => ctxs
                    .iter()
                    .map(|c| cost.entry_latency_at(&e.entry, c.query_lens.iter().sum(), c.batch_size, Some(c)))
                    .sum(),
                _ => cost.entry_latency_at(&e.entry, toks, reqs, None),
            };
            total += e.repeat_count as f64 * one;
        }
        for (per_token, repeat) in g.collective_bytes() {
            total += repeat as f64 * comm_latency(g.tp, per_token * toks, self.hw);
        }
        Ok(total)
    }
}

/// Fit (or load cached) regressors for every signature in the graph.
pub fn fit_graph(db: &LatencyDb, graph: &CallGraph) -> Result<Regressors, SimError> {
    let mut regs = Regressors::default();
    let mut missing = Vec::new();
    for e in &graph.entries {
        if regs.by_hash.contains_key(&e.hash) {
            continue;
        }
        let records = db.measurements(&e.hash)?;
        if records.is_empty() {
            missing.push((e.entry.path.clone(), hex(&e.hash)));
            continue;
        }
        regs.by_hash.insert(e.hash, fit_cached(db, &e.hash, &e.entry, &records, graph.model.dtype_bytes)?);
    }
    if !missing.is_empty() {
        return Err(SimError::MissingSignatures(missing));
    }
    Ok(regs)
}

fn fit_cached(
    db: &LatencyDb,
    hash: &Hash,
    entry: &RunnableEntry,
    records: &[crate::profiler::LatencyRecord],
    dtype_bytes: u64,
) -> Result<Regressor, SimError> {
    let n = records.len() as u64;
    if let Some(text) = db.cached_regressor(hash, n)? {
        if let Ok(r) = serde_json::from_str::<Regressor>(&text) {
            return Ok(r);
        }
    }
    let r: Regressor = fit_signature(hash, entry, records, dtype_bytes)?;
    db.cache_regressor(hash, n, &serde_json::to_string(&r).expect("regressor serializes"))?;
    Ok(r)
}

/// Fit every signature stored in the database.
pub fn fit(db: &LatencyDb, dtype_bytes: u64) -> Result<Regressors, SimError> {
    let mut regs = Regressors::default();
    for hash in db.signature_hashes()? {
        let Some(entry) = db.signature_entry(&hash)? else { continue };
        let records = db.measurements(&hash)?;
        regs.by_hash.insert(hash, fit_cached(db, &hash, &entry, &records, dtype_bytes)?);
    }
    Ok(regs)
}

/// KV budget: device memory (per rank) minus the rank's share of weights,
/// with 10% headroom.
pub fn default_kv_budget(model: &ModelConfig, hw: &HardwareSpec, tp: u64) -> u64 {
    let attn = model.hidden_dim * (model.num_q_heads + 2 * model.num_kv_heads) * model.head_dim
        + model.num_q_heads * model.head_dim * model.hidden_dim;
    let mlp = match &model.moe {
        Some(m) => m.num_experts * 3 * model.hidden_dim * m.expert_intermediate + model.hidden_dim * m.num_experts,
        None => 3 * model.hidden_dim * model.intermediate_size,
    };
    let params = model.num_layers * (attn + mlp) + 2 * model.vocab_size * model.hidden_dim;
    let weights = params * model.dtype_bytes / tp.max(1);
    (hw.memory_capacity as f64 * 0.9) as u64 - weights.min((hw.memory_capacity as f64 * 0.9) as u64)
}

pub fn sched_config(model: &ModelConfig, hw: &HardwareSpec, tp: u64, chunk: u64, max_batch: usize) -> SchedConfig {
    SchedConfig {
        chunk,
        max_batch,
        max_kv_bytes: default_kv_budget(model, hw, tp),
        kv_bytes_per_token: model.kv_bytes_per_token() / tp.max(1),
    }
}

/// One simulated iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub start_s: f64,
    pub end_s: f64,
    pub batch: IterationBatch,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunResult {
    pub metrics: Metrics,
    pub iterations: Vec<IterationRecord>,
}

/// The event loop. Requests whose arrival is at or before the clock join
/// the waiting queue before each scheduling decision.
pub fn simulate(workload: &[Request], config: SchedConfig, model: &mut dyn IterLatency) -> Result<RunResult, SimError> {
    for (i, r) in workload.iter().enumerate() {
        if i > 0 && r.arrival_s < workload[i - 1].arrival_s {
            return Err(SimError::Unsorted(i));
        }
        if r.prompt_tokens == 0 || r.output_tokens == 0 {
            return Err(SimError::EmptyRequest(r.id));
        }
        let need = config.reserve(r);
        if need > config.max_kv_bytes {
            return Err(SimError::RequestTooLarge {
                id: r.id,
                need,
                budget: config.max_kv_bytes,
            });
        }
    }
    let index: BTreeMap<usize, usize> = workload.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    let mut first_token = vec![f64::NAN; workload.len()];
    let mut finish = vec![f64::NAN; workload.len()];
    let mut state = SchedulerState::new(config);
    let mut pending: VecDeque<&Request> = workload.iter().collect();
    let mut out = RunResult::default();
    let guard: u64 = workload.iter().map(|r| r.prompt_tokens + r.output_tokens).sum::<u64>() * ITERATION_GUARD + 16;
    let mut iterations = 0u64;
    loop {
        while pending.front().is_some_and(|r| r.arrival_s <= state.clock) {
            state.waiting.push_back(pending.pop_front().expect("front exists").clone());
        }
        if state.is_idle() {
            match pending.front() {
                Some(r) => {
                    state.clock = r.arrival_s;
                    continue;
                }
                None => break,
            }
        }
        iterations += 1;
        if iterations > guard {
            return Err(SimError::NonTermination {
                iterations,
                waiting: state.waiting.len(),
                running: state.running.len(),
                clock: state.clock,
            });
        }
        let batch = schedule_step(&mut state);
        if batch.is_empty() {
            // nothing fits until something arrives; only possible with an empty running set
            match pending.front() {
                Some(r) if state.running.is_empty() => {
                    state.clock = state.clock.max(r.arrival_s);
                    continue;
                }
                _ => {
                    return Err(SimError::NonTermination {
                        iterations,
                        waiting: state.waiting.len(),
                        running: state.running.len(),
                        clock: state.clock,
                    })
                }
            }
        }
        let start = state.clock;
        let dt = model.iter_latency(&batch)?;
        state.clock = start + dt;
        for p in complete_step(&mut state, &batch) {
            let i = index[&p.request];
            if p.first_token {
                first_token[i] = state.clock;
            }
            if p.finished {
                finish[i] = state.clock;
            }
        }
        out.metrics.schedule.push((start, batch.num_reqs()));
        out.iterations.push(IterationRecord {
            start_s: start,
            end_s: state.clock,
            batch,
        });
    }
    out.metrics.iterations = out.iterations.len();
    out.metrics.makespan_s = state.clock;
    out.metrics.requests = workload
        .iter()
        .enumerate()
        .map(|(i, r)| RequestMetrics {
            id: r.id,
            arrival_s: r.arrival_s,
            prompt_tokens: r.prompt_tokens,
            output_tokens: r.output_tokens,
            first_token_s: first_token[i],
            finish_s: finish[i],
            ttft_s: first_token[i] - r.arrival_s,
            tpot_s: (r.output_tokens >= 2).then(|| (finish[i] - first_token[i]) / (r.output_tokens - 1) as f64),
        })
        .collect();
    Ok(out)
}

/// Regression-backed run.
pub fn run(workload: &[Request], graph: &CallGraph, regs: &Regressors, comm_table: &[(u64, f64)], config: SchedConfig) -> Result<RunResult, SimError> {
    let mut m = RegressionModel::new(graph, regs, config.chunk, comm_table)?;
    simulate(workload, config, &mut m)
}

/// Oracle-backed ground truth on the same scheduler.
pub fn reference_run(workload: &[Request], graph: &CallGraph, hw: &HardwareSpec, config: SchedConfig) -> Result<RunResult, SimError> {
    let mut m = ReferenceModel { graph, hw };
    simulate(workload, config, &mut m)
}

/// Iterations whose batch composition matches, over the shorter run.
pub fn schedule_agreement(a: &[IterationRecord], b: &[IterationRecord]) -> (usize, usize) {
    let same = a.iter().zip(b).filter(|(x, y)| x.batch == y.batch).count();
    (same, a.len().max(b.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(f64);

    impl IterLatency for Fixed {
        fn iter_latency(&mut self, _: &IterationBatch) -> Result<f64, SimError> {
            Ok(self.0)
        }
    }

    fn cfg(max_batch: usize) -> SchedConfig {
        SchedConfig {
            chunk: 8192,
            max_batch,
            max_kv_bytes: 1 << 40,
            kv_bytes_per_token: 1,
        }
    }

    fn req(id: usize, arrival: f64, prompt: u64, output: u64) -> Request {
        Request {
            id,
            arrival_s: arrival,
            prompt_tokens: prompt,
            output_tokens: output,
            cached_tokens: 0,
        }
    }

    #[test]
    fn empty_workload() {
        let r = simulate(&[], cfg(4), &mut Fixed(1.0)).unwrap();
        assert_eq!(r.metrics.iterations, 0);
        assert!(r.metrics.requests.is_empty());
    }

    #[test]
    fn single_request_ttft_is_prefill_time() {
        let r = simulate(&[req(0, 0.5, 10000, 3)], cfg(4), &mut Fixed(0.25)).unwrap();
        let m = &r.metrics.requests[0];
        assert!((m.ttft_s - 0.5).abs() < 1e-12);
        assert!((m.tpot_s.unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(r.metrics.iterations, 4);
    }

    #[test]
    fn fcfs_blocking_with_batch_of_one() {
        let w = [req(0, 0.0, 100, 2), req(1, 0.0, 100, 2)];
        let r = simulate(&w, cfg(1), &mut Fixed(1.0)).unwrap();
        assert_eq!(r.metrics.requests[0].ttft_s, 1.0);
        assert_eq!(r.metrics.requests[1].ttft_s, 3.0);
    }

    #[test]
    fn single_token_output_has_no_tpot() {
        let r = simulate(&[req(0, 0.0, 4, 1)], cfg(4), &mut Fixed(1.0)).unwrap();
        assert_eq!(r.metrics.requests[0].tpot_s, None);
    }

    #[test]
    fn oversized_request_rejected() {
        let c = SchedConfig {
            max_kv_bytes: 10,
            ..cfg(4)
        };
        assert!(matches!(
            simulate(&[req(0, 0.0, 8, 8)], c, &mut Fixed(1.0)),
            Err(SimError::RequestTooLarge { .. })
        ));
    }
}
