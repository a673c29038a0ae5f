//! Chrome Trace Event JSON export/import.
//!
//! Layout: a JSON array with one metadata event (`ph: "M"`) carrying the
//! registry and trace options, followed by one complete event (`ph: "X"`) per
//! trace event. Taint information lives under `args.dooly`. One event per
//! line, so files diff well.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{AttrValue, Category, DummyBatch, TaintedTrace, TraceError, TraceEvent, TraceOptions};
use crate::taint::{Taint, TaintRegistry, TaintedValue};
use crate::tracer::TaintedDim;

const META_NAME: &str = "dooly.trace";

#[derive(Serialize, Deserialize)]
struct MetaEvent {
    name: String,
    ph: String,
    pid: u32,
    tid: u32,
    args: MetaArgs,
}

#[derive(Serialize, Deserialize)]
struct MetaArgs {
    dooly: Meta,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: String,
    backend: String,
    options: TraceOptions,
    batch: DummyBatch,
    registry: Vec<(u64, Taint)>,
    collisions: Vec<u64>,
    ambiguities: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    retraced_from: Option<Retrace>,
}

#[derive(Serialize, Deserialize)]
struct Retrace {
    batch: DummyBatch,
    collided: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct CompleteEvent {
    name: String,
    cat: Category,
    ph: String,
    ts: u64,
    dur: u64,
    pid: u32,
    tid: u32,
    args: EventArgs,
}

#[derive(Serialize, Deserialize)]
struct EventArgs {
    id: u64,
    parent: Option<u64>,
    dooly: Ext,
}

#[derive(Serialize, Deserialize)]
struct Ext {
    dims: Vec<(u64, Taint)>,
    ranks: Vec<usize>,
    scalars: Vec<(u64, Taint)>,
    attrs: BTreeMap<String, AttrValue>,
    kernel_symbols: Vec<String>,
}

fn line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("trace events serialize")
}

/// Serialize a trace. Deterministic: equal traces give equal bytes.
pub fn export(trace: &TaintedTrace) -> String {
    let meta = MetaEvent {
        name: META_NAME.into(),
        ph: "M".into(),
        pid: 0,
        tid: 0,
        args: MetaArgs {
            dooly: Meta {
                model: trace.model.clone(),
                backend: trace.backend.clone(),
                options: trace.options,
                batch: trace.batch,
                registry: trace
                    .registry
                    .entries()
                    .iter()
                    .map(|(v, t)| (*v, t.clone()))
                    .collect(),
                collisions: trace.registry.collisions().iter().copied().collect(),
                ambiguities: trace.ambiguities.clone(),
                retraced_from: trace.retraced_from.as_ref().map(|(b, c)| Retrace {
                    batch: *b,
                    collided: c.clone(),
                }),
            },
        },
    };
    let mut lines = vec![line(&meta)];
    for e in &trace.events {
        let ev = CompleteEvent {
            name: e.name.clone(),
            cat: e.category,
            ph: "X".into(),
            ts: e.begin,
            dur: e.end - e.begin,
            pid: 0,
            tid: 0,
            args: EventArgs {
                id: e.id,
                parent: e.parent_id,
                dooly: Ext {
                    dims: e.dims().map(|d| (d.size, d.taint.clone())).collect(),
                    ranks: e.inputs.iter().map(Vec::len).collect(),
                    scalars: e.scalars.iter().map(|s| (s.value, s.taint.clone())).collect(),
                    attrs: e.attrs.clone(),
                    kernel_symbols: e.kernel_symbols.clone(),
                },
            },
        };
        lines.push(line(&ev));
    }
    format!("[\n{}\n]\n", lines.join(",\n"))
}

/// Parse a trace written by [`export`]. Events with other phases are ignored.
pub fn import(text: &str) -> Result<TaintedTrace, TraceError> {
    let fmt = |e: serde_json::Error| TraceError::Format(e.to_string());
    let raw: Vec<serde_json::Value> = serde_json::from_str(text).map_err(fmt)?;
    let mut meta: Option<Meta> = None;
    let mut events = Vec::new();
    for v in raw {
        match v.get("ph").and_then(|p| p.as_str()) {
            Some("M") if v.get("name").and_then(|n| n.as_str()) == Some(META_NAME) => {
                let m: MetaEvent = serde_json::from_value(v).map_err(fmt)?;
                meta = Some(m.args.dooly);
            }
            Some("X") => {
                let c: CompleteEvent = serde_json::from_value(v).map_err(fmt)?;
                events.push(from_complete(c)?);
            }
            _ => {}
        }
    }
    let meta = meta.ok_or_else(|| TraceError::Format("missing dooly.trace metadata event".into()))?;
    for (i, e) in events.iter().enumerate() {
        if e.id != i as u64 {
            return Err(TraceError::Format(format!("event ids must be dense, found {} at {i}", e.id)));
        }
    }
    Ok(TaintedTrace {
        model: meta.model,
        backend: meta.backend,
        options: meta.options,
        batch: meta.batch,
        events,
        registry: TaintRegistry::from_parts(
            meta.registry.into_iter().collect(),
            meta.collisions.into_iter().collect::<BTreeSet<_>>(),
        ),
        ambiguities: meta.ambiguities,
        retraced_from: meta.retraced_from.map(|r| (r.batch, r.collided)),
    })
}

fn from_complete(c: CompleteEvent) -> Result<TraceEvent, TraceError> {
    let ext = c.args.dooly;
    if ext.ranks.iter().sum::<usize>() != ext.dims.len() {
        return Err(TraceError::Format(format!("event {}: ranks do not cover dims", c.args.id)));
    }
    let mut dims = ext.dims.into_iter().map(|(s, t)| TaintedDim::new(s, t));
    let inputs = ext.ranks.iter().map(|r| dims.by_ref().take(*r).collect()).collect();
    Ok(TraceEvent {
        id: c.args.id,
        parent_id: c.args.parent,
        category: c.cat,
        name: c.name,
        begin: c.ts,
        end: c.ts + c.dur,
        inputs,
        scalars: ext.scalars.into_iter().map(|(v, t)| TaintedValue::new(v, t)).collect(),
        attrs: ext.attrs,
        kernel_symbols: ext.kernel_symbols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{backend, moe_8x7b};
    use crate::tracer::run_trace;

    #[test]
    fn roundtrip_is_byte_exact() {
        let cfg = moe_8x7b();
        let be = backend("triton", std::slice::from_ref(&cfg));
        let tr = run_trace(&cfg, &be, DummyBatch { num_reqs: 3, tokens_per_req: 271 }, &TraceOptions::default()).unwrap();
        let text = export(&tr);
        let back = import(&text).unwrap();
        assert_eq!(back, tr);
        assert_eq!(export(&back), text);
    }

    #[test]
    fn missing_meta_is_rejected() {
        assert!(matches!(import("[]"), Err(TraceError::Format(_))));
        assert!(matches!(import("{"), Err(TraceError::Format(_))));
    }
}
