//! Duplication-aware profiling: signatures, dedup against the latency store,
//! taint-driven sweeps and the analytical oracle.

pub mod db;
pub mod oracle;
pub mod signature;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::modelir::{BackendSpec, CorpusManifest, ModelConfig, Phase, SweepGrid};
use crate::opset::{find_opset, Granularity, OpsetError, RunnableEntry, RunnableSet, WorkloadPoint};
use crate::taint::TaintLabel;
use crate::tracer::{run_trace, AttrValue, DummyBatch, TraceError, TraceOptions};

pub use db::{DbError, LatencyDb, LatencyRecord, Source};
pub use oracle::{comm_latency, oracle_latency, CostModel, OpInstance};
pub use signature::{canonicalize, signature, signature_hash, Hash, Signature};

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Opset(#[from] OpsetError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
    #[error("oracle produced {latency} s for {entry} at {point:?}")]
    OraclePanic {
        entry: String,
        point: WorkloadPoint,
        latency: f64,
    },
    #[error("{0} is already profiled; only new signatures are swept")]
    AlreadyProfiled(String),
}

/// Workload points an entry is measured at. Only the axes the entry's taints
/// depend on are swept; context-dependent entries cover the full grid in
/// both phases.
pub fn sweep_points(entry: &RunnableEntry, grid: &SweepGrid) -> Vec<WorkloadPoint> {
    let mut out = Vec::new();
    if entry.context_required {
        for phase in Phase::BOTH {
            for &t in &grid.token_counts {
                for &r in &grid.request_counts {
                    for &kv in &grid.kv_lens {
                        out.push(WorkloadPoint {
                            num_toks: t,
                            num_reqs: r,
                            phase,
                            chunk: grid.prefill_chunk,
                            kv_len: kv,
                        });
                    }
                }
            }
        }
        return out;
    }
    let labels = entry.workload_labels();
    let toks = if labels.contains(&TaintLabel::NumToks) { grid.token_counts.clone() } else { vec![1] };
    let reqs = if labels.contains(&TaintLabel::NumReqs) { grid.request_counts.clone() } else { vec![1] };
    for &t in &toks {
        for &r in &reqs {
            out.push(WorkloadPoint {
                num_toks: t,
                num_reqs: r,
                phase: Phase::Prefill,
                chunk: grid.prefill_chunk,
                kv_len: 0,
            });
        }
    }
    out
}

/// Measure one entry over the grid with the oracle.
pub fn sweep(entry: &RunnableEntry, hash: &Hash, grid: &SweepGrid, cost: &CostModel<'_>) -> Result<Vec<LatencyRecord>, ProfileError> {
    sweep_points(entry, grid)
        .into_iter()
        .map(|point| {
            let latency = cost.entry_latency(entry, &point);
            if !(latency.is_finite() && latency > 0.0) {
                return Err(ProfileError::OraclePanic {
                    entry: entry.path.clone(),
                    point,
                    latency,
                });
            }
            Ok(LatencyRecord {
                signature_hash: *hash,
                workload: point,
                latency_s: latency,
                source: Source::Oracle,
            })
        })
        .collect()
}

/// An entry of one configuration with its signature; duplicates within the
/// configuration are merged by summing repeat counts.
#[derive(Debug, Clone)]
pub struct SignedEntry {
    pub signature: Signature,
    pub entry: RunnableEntry,
    pub repeat_count: u64,
}

pub fn sign_entries(set: &RunnableSet) -> Vec<SignedEntry> {
    let mut out: Vec<SignedEntry> = Vec::new();
    let mut index: BTreeMap<Hash, usize> = BTreeMap::new();
    for e in &set.entries {
        let sig = signature(e);
        match index.get(&sig.hash) {
            Some(&i) => out[i].repeat_count += e.repeat_count,
            None => {
                index.insert(sig.hash, out.len());
                out.push(SignedEntry {
                    signature: sig,
                    entry: e.clone(),
                    repeat_count: e.repeat_count,
                });
            }
        }
    }
    out
}

/// Split entries into new signatures and ones already in the store.
pub fn dedup(entries: &[SignedEntry], db: &LatencyDb) -> Result<(Vec<SignedEntry>, Vec<SignedEntry>), DbError> {
    let mut to_profile = Vec::new();
    let mut skipped = Vec::new();
    for e in entries {
        if db.has_signature(&e.signature.hash)? {
            skipped.push(e.clone());
        } else {
            to_profile.push(e.clone());
        }
    }
    Ok((to_profile, skipped))
}

/// Attention group label, e.g. `32/8/128` or `window=4K`.
pub fn attention_group(entry: &RunnableEntry) -> Option<String> {
    if entry.stateful_kind() != Some("attention") {
        return None;
    }
    let get = |k: &str| entry.attrs.get(k).and_then(AttrValue::as_int);
    if let Some(w) = get("sliding_window") {
        return Some(format!("window={}K", w / 1024));
    }
    Some(format!("{}/{}/{}", get("num_heads")?, get("num_kv_heads")?, get("head_size")?))
}

#[derive(Debug, Clone)]
pub struct EntryOutcome {
    pub hash: Hash,
    pub name: String,
    pub path: String,
    pub granularity: Granularity,
    pub repeat_count: u64,
    pub reused: bool,
    pub group: Option<String>,
    /// Oracle time of the sweep (measured, or saved when reused).
    pub sweep_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ConfigReport {
    pub model: String,
    pub backend: String,
    pub config_id: i64,
    pub outcomes: Vec<EntryOutcome>,
    pub measurements_written: usize,
    pub retraced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub group: String,
    pub occurrences: u64,
    pub reused: u64,
    pub profiled_seconds: f64,
    pub saved_seconds: f64,
}

impl GroupRow {
    pub fn reduction(&self) -> f64 {
        let total = self.profiled_seconds + self.saved_seconds;
        if total > 0.0 {
            self.saved_seconds / total
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ProfileReport {
    pub configs: Vec<ConfigReport>,
}

impl ProfileReport {
    fn rows<'a>(&'a self, pick: impl Fn(&EntryOutcome) -> Option<String> + 'a) -> Vec<GroupRow> {
        let mut rows: BTreeMap<String, GroupRow> = BTreeMap::new();
        for o in self.configs.iter().flat_map(|c| &c.outcomes) {
            let Some(g) = pick(o) else { continue };
            let row = rows.entry(g.clone()).or_insert_with(|| GroupRow {
                group: g,
                occurrences: 0,
                reused: 0,
                profiled_seconds: 0.0,
                saved_seconds: 0.0,
            });
            row.occurrences += 1;
            if o.reused {
                row.reused += 1;
                row.saved_seconds += o.sweep_seconds;
            } else {
                row.profiled_seconds += o.sweep_seconds;
            }
        }
        rows.into_values().collect()
    }

    /// Attention groups plus an `aggregate` row over all of them.
    pub fn attention_table(&self) -> Vec<GroupRow> {
        let mut rows = self.rows(|o| o.group.clone());
        let agg = self.rows(|o| o.group.as_ref().map(|_| "aggregate".to_string()));
        rows.extend(agg);
        rows
    }

    /// One row over every entry.
    pub fn overall(&self) -> GroupRow {
        self.rows(|_| Some("all".to_string())).pop().unwrap_or(GroupRow {
            group: "all".into(),
            occurrences: 0,
            reused: 0,
            profiled_seconds: 0.0,
            saved_seconds: 0.0,
        })
    }

    /// Cumulative unique signatures after each model, in profiling order.
    pub fn cumulative_unique(&self) -> Vec<(String, u64, u64)> {
        let mut seen = BTreeSet::new();
        let mut total = 0;
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for c in &self.configs {
            for o in &c.outcomes {
                seen.insert(o.hash);
                total += 1;
            }
            match out.last_mut() {
                Some(last) if last.0 == c.model => {
                    last.1 = seen.len() as u64;
                    last.2 = total;
                }
                _ => out.push((c.model.clone(), seen.len() as u64, total)),
            }
        }
        out
    }
}

/// Trace and resolve one configuration.
pub fn runnable_set(model: &ModelConfig, backend: &BackendSpec, tp: u64) -> Result<(RunnableSet, bool), ProfileError> {
    let batch = DummyBatch::collision_free(model, tp, &BTreeSet::new());
    let trace = run_trace(model, backend, batch, &TraceOptions::with_tp(tp))?;
    Ok((find_opset(&trace)?, trace.retraced_from.is_some()))
}

/// The grid used for every configuration of a manifest: kv lengths capped at
/// the largest context in the manifest, so stored measurements do not depend
/// on profiling order.
pub fn manifest_grid(manifest: &CorpusManifest, grid: &SweepGrid) -> SweepGrid {
    let max_ctx = manifest.models.iter().map(|m| m.max_context).max().unwrap_or(u64::MAX);
    grid.capped(max_ctx)
}

/// Trace, resolve, dedup and sweep one (model, backend) configuration.
pub fn profile_config(
    db: &mut LatencyDb,
    manifest: &CorpusManifest,
    model: &ModelConfig,
    backend: &BackendSpec,
    grid: &SweepGrid,
) -> Result<ConfigReport, ProfileError> {
    let tp = manifest.tp_degree;
    let hw = &manifest.hardware;
    let (set, retraced) = runnable_set(model, backend, tp)?;
    let signed = sign_entries(&set);
    let config_id = db.config_id(&hw.name, &model.name, &backend.name, tp)?;
    let (to_profile, skipped) = dedup(&signed, db)?;

    let cost = CostModel { model, backend, hw };
    let swept: Vec<Vec<LatencyRecord>> = to_profile
        .par_iter()
        .map(|e| sweep(&e.entry, &e.signature.hash, grid, &cost))
        .collect::<Result<_, _>>()?;

    for e in &to_profile {
        db.insert_signature(&e.signature, &e.entry)?;
    }
    let mut records: Vec<LatencyRecord> = swept.iter().flatten().cloned().collect();
    // a known signature still gets the grid points it was never measured at
    for e in &skipped {
        let h = &e.signature.hash;
        for r in sweep(&e.entry, h, grid, &cost)? {
            if db.measurement(h, &r.workload)?.is_none() {
                records.push(r);
            }
        }
    }
    let written = db.insert_measurements(&records)?;
    db.set_model_operations(
        config_id,
        &signed.iter().map(|e| (e.signature.hash, e.repeat_count)).collect::<Vec<_>>(),
    )?;
    db.set_collectives(config_id, &set.collectives)?;
    if tp > 1 {
        let mut sizes = BTreeSet::new();
        for c in &set.collectives {
            let per_token: u64 = c.inputs.iter().flatten().skip(1).map(|d| d.size).product();
            for &t in &grid.token_counts {
                sizes.insert(t * per_token * model.dtype_bytes);
            }
        }
        for bytes in sizes {
            db.insert_comm(&hw.topology, tp, "all_reduce", bytes, comm_latency(tp, bytes, hw))?;
        }
    }

    let mut outcomes = Vec::with_capacity(signed.len());
    for (e, swept) in to_profile.iter().zip(&swept) {
        outcomes.push(outcome(e, false, swept.iter().map(|r| r.latency_s).sum()));
    }
    for e in &skipped {
        outcomes.push(outcome(e, true, db.measured_seconds(&e.signature.hash)?));
    }
    // report in entry order
    let order: BTreeMap<Hash, usize> = signed.iter().enumerate().map(|(i, e)| (e.signature.hash, i)).collect();
    outcomes.sort_by_key(|o| order[&o.hash]);
    Ok(ConfigReport {
        model: model.name.clone(),
        backend: backend.name.clone(),
        config_id,
        outcomes,
        measurements_written: written,
        retraced,
    })
}

fn outcome(e: &SignedEntry, reused: bool, seconds: f64) -> EntryOutcome {
    EntryOutcome {
        hash: e.signature.hash,
        name: e.entry.name.clone(),
        path: e.entry.path.clone(),
        granularity: e.entry.granularity,
        repeat_count: e.repeat_count,
        reused,
        group: attention_group(&e.entry),
        sweep_seconds: seconds,
    }
}

/// Profile every (model, backend) pair: models in manifest order, backends
/// in manifest order within each model.
pub fn profile_manifest(db: &mut LatencyDb, manifest: &CorpusManifest, grid: &SweepGrid) -> Result<ProfileReport, ProfileError> {
    let grid = manifest_grid(manifest, grid);
    let mut report = ProfileReport::default();
    for model in &manifest.models {
        for backend in &manifest.backends {
            report.configs.push(profile_config(db, manifest, model, backend, &grid)?);
        }
    }
    Ok(report)
}

/// Rebuild the dedup report from the store alone. Configurations are taken
/// in insertion order; an occurrence counts as reused when an earlier
/// configuration already referenced its signature.
pub fn report_from_db(db: &LatencyDb) -> Result<ProfileReport, DbError> {
    let mut seen = BTreeSet::new();
    let mut entries: BTreeMap<Hash, Option<RunnableEntry>> = BTreeMap::new();
    let mut seconds: BTreeMap<Hash, f64> = BTreeMap::new();
    let mut report = ProfileReport::default();
    for c in db.configurations()? {
        let ops = db.model_operations(c.config_id)?;
        if ops.is_empty() {
            continue;
        }
        let mut outcomes = Vec::with_capacity(ops.len());
        for (hash, repeat) in ops {
            if let std::collections::btree_map::Entry::Vacant(v) = entries.entry(hash) {
                v.insert(db.signature_entry(&hash)?);
                seconds.insert(hash, db.measured_seconds(&hash)?);
            }
            let entry = entries[&hash].as_ref();
            outcomes.push(EntryOutcome {
                hash,
                name: entry.map(|e| e.name.clone()).unwrap_or_default(),
                path: entry.map(|e| e.path.clone()).unwrap_or_default(),
                granularity: entry.map_or(Granularity::Operator, |e| e.granularity),
                repeat_count: repeat,
                reused: !seen.insert(hash),
                group: entry.and_then(attention_group),
                sweep_seconds: seconds[&hash],
            });
        }
        report.configs.push(ConfigReport {
            model: c.model,
            backend: c.backend,
            config_id: c.config_id,
            outcomes,
            measurements_written: 0,
            retraced: false,
        });
    }
    Ok(report)
}

impl ProfileReport {
    /// Group rows as CSV.
    pub fn groups_csv(&self) -> String {
        let mut out = String::from("group,N,R,profile_s,saved_s,reduction\n");
        for r in self.attention_table().into_iter().chain([self.overall()]) {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.4}\n",
                r.group,
                r.occurrences,
                r.reused,
                r.profiled_seconds,
                r.saved_seconds,
                r.reduction()
            ));
        }
        out
    }

    /// Cumulative unique-vs-total curve as CSV.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("model,unique,total\n");
        for (m, u, t) in self.cumulative_unique() {
            out.push_str(&format!("{m},{u},{t}\n"));
        }
        out
    }
}
