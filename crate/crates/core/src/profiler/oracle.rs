//! Analytical roofline latency oracle.
//!
//! `latency = 5 µs + multiplier × max(flops / peak_flops, bytes / mem_bw)`,
//! where the multiplier is the product of the backend's cost multipliers over
//! the op's kernel symbols. Deterministic by construction.

use std::collections::BTreeMap;

use crate::modelir::{geometry_key_for, AttentionKind, BackendSpec, HardwareSpec, ModelConfig, Phase};
use crate::opset::{generate, stage2, RunnableEntry, Stage2, WorkloadPoint};
use crate::tracer::{AttrValue, OpKind};

pub const LAUNCH_OVERHEAD_S: f64 = 5e-6;

/// One concrete op call.
#[derive(Debug, Clone, Copy)]
pub struct OpInstance<'a> {
    pub kind: OpKind,
    pub inputs: &'a [Vec<u64>],
    pub scalars: &'a [u64],
    pub attrs: &'a BTreeMap<String, AttrValue>,
    pub kernel_symbols: &'a [String],
    pub dtype_bytes: u64,
    pub ctx: Option<&'a Stage2>,
}

fn dim(inputs: &[Vec<u64>], i: usize, j: usize) -> f64 {
    inputs.get(i).and_then(|s| s.get(j)).copied().unwrap_or(1) as f64
}

/// `(flops, bytes)` of one call.
pub fn op_cost(op: &OpInstance<'_>) -> (f64, f64) {
    let b = op.dtype_bytes as f64;
    let x = op.inputs;
    match op.kind {
        OpKind::Linear => {
            let (m, k, n) = (dim(x, 0, 0), dim(x, 0, 1), dim(x, 1, 1));
            (2.0 * m * k * n, b * (m * k + k * n + m * n))
        }
        OpKind::Embedding => {
            let (t, h) = (dim(x, 0, 0), dim(x, 1, 1));
            (0.0, b * 2.0 * t * h)
        }
        OpKind::RmsNorm => {
            let (t, h) = (dim(x, 0, 0), dim(x, 0, 1));
            (4.0 * t * h, b * (4.0 * t * h + h))
        }
        OpKind::Reshape | OpKind::AllReduce => (0.0, 0.0),
        OpKind::Rope => {
            let t = dim(x, 1, 0);
            let heads = dim(x, 1, 1) + dim(x, 2, 1);
            let d = dim(x, 1, 2);
            (3.0 * t * heads * d, b * 2.0 * t * heads * d)
        }
        OpKind::KvCacheWrite => {
            let t = op.ctx.map_or(dim(x, 0, 0), |c| c.query_lens.iter().sum::<u64>() as f64);
            let (hk, d) = (dim(x, 0, 1), dim(x, 0, 2));
            (0.0, b * 4.0 * t * hk * d)
        }
        OpKind::Attention => {
            let (hq, d, hk) = (dim(x, 0, 1), dim(x, 0, 2), dim(x, 1, 1));
            let window = op.attrs.get("sliding_window").and_then(AttrValue::as_int).map(|w| w as u64);
            let single;
            let (q, s): (&[u64], &[u64]) = match op.ctx {
                Some(c) => (&c.query_lens, &c.seq_lens),
                None => {
                    single = [x.first().and_then(|v| v.first()).copied().unwrap_or(1)];
                    (&single, &single)
                }
            };
            let mut work = 0.0;
            let mut ctx_tokens = 0.0;
            for (qi, si) in q.iter().zip(s) {
                let visible = window.map_or(*si, |w| (*si).min(w)) as f64;
                work += *qi as f64 * visible;
                ctx_tokens += visible;
            }
            let new_tokens: u64 = q.iter().sum();
            let flops = 4.0 * hq * d * work;
            let bytes = b * (2.0 * new_tokens as f64 * hq * d + 2.0 * ctx_tokens * hk * d);
            (flops, bytes)
        }
        OpKind::SiluAndMul => {
            let (t, two_i) = (dim(x, 0, 0), dim(x, 0, 1));
            (2.0 * t * two_i, b * 1.5 * t * two_i)
        }
        OpKind::TopkRouter => {
            let (t, e) = (dim(x, 0, 0), dim(x, 0, 1));
            let k = op.scalars.first().copied().unwrap_or(1) as f64;
            (3.0 * t * e, b * t * e + 8.0 * t * k)
        }
        OpKind::FusedMoe => {
            let (t, h) = (dim(x, 0, 0), dim(x, 0, 1));
            let (e, i) = (dim(x, 2, 0), dim(x, 2, 2));
            let tk = dim(x, 3, 0);
            // expected distinct experts under uniform random routing
            let active = e * (1.0 - (1.0 - 1.0 / e).powf(tk));
            (6.0 * tk * h * i, b * (3.0 * active * h * i + 2.0 * t * h + 2.0 * tk * h))
        }
        OpKind::IndexSelect => {
            let (h, r) = (dim(x, 0, 1), dim(x, 1, 0));
            (0.0, b * 2.0 * r * h)
        }
    }
}

pub fn oracle_latency(op: &OpInstance<'_>, hw: &HardwareSpec, backend: &BackendSpec) -> f64 {
    let (flops, bytes) = op_cost(op);
    let mult = backend.multiplier(op.kernel_symbols);
    LAUNCH_OVERHEAD_S + mult * (flops / hw.peak_flops).max(bytes / hw.mem_bw)
}

/// Ring all-reduce: `2(tp-1)/tp · (alpha + bytes/tp · beta)`. Zero for tp < 2.
pub fn comm_latency(tp: u64, bytes: u64, hw: &HardwareSpec) -> f64 {
    if tp < 2 {
        return 0.0;
    }
    let tp_f = tp as f64;
    2.0 * (tp_f - 1.0) / tp_f * (hw.comm_alpha + bytes as f64 / tp_f * hw.comm_beta)
}

/// Everything needed to price entries of one configuration.
#[derive(Debug, Clone, Copy)]
pub struct CostModel<'a> {
    pub model: &'a ModelConfig,
    pub backend: &'a BackendSpec,
    pub hw: &'a HardwareSpec,
}

impl CostModel<'_> {
    /// Latency of one instance of `entry` at explicit token/request counts,
    /// with engine metadata for context-dependent entries.
    pub fn entry_latency_at(&self, entry: &RunnableEntry, num_toks: u64, num_reqs: u64, ctx: Option<&Stage2>) -> f64 {
        let point = WorkloadPoint {
            num_toks,
            num_reqs,
            phase: ctx.map_or(Phase::Prefill, |c| c.phase),
            chunk: num_toks,
            kv_len: 0,
        };
        entry
            .members
            .iter()
            .map(|m| {
                let spec = generate(&m.inputs, &m.scalars, &point);
                let attention_kernels;
                let kernels: &[String] = if m.kind == OpKind::Attention {
                    attention_kernels = self.attention_kernels(m.attrs.get("sliding_window"), point.phase);
                    &attention_kernels
                } else {
                    &m.kernel_symbols
                };
                let op = OpInstance {
                    kind: m.kind,
                    inputs: &spec.inputs,
                    scalars: &spec.scalars,
                    attrs: &m.attrs,
                    kernel_symbols: kernels,
                    dtype_bytes: self.model.dtype_bytes,
                    ctx,
                };
                oracle_latency(&op, self.hw, self.backend)
            })
            .sum()
    }

    fn attention_kernels(&self, window: Option<&AttrValue>, phase: Phase) -> Vec<String> {
        let kind = match window.and_then(AttrValue::as_int) {
            Some(w) => AttentionKind::Sliding { window: w as u64 },
            None => AttentionKind::Full,
        };
        self.backend
            .kernels(&geometry_key_for(self.model, kind), phase)
            .map(<[String]>::to_vec)
            .unwrap_or_default()
    }

    /// Latency at a sweep point. Context-dependent entries get stage-2
    /// metadata for the point's phase; decode runs one token per request.
    pub fn entry_latency(&self, entry: &RunnableEntry, point: &WorkloadPoint) -> f64 {
        if entry.context_required {
            let ctx = stage2(point);
            let toks = ctx.query_lens.iter().sum();
            self.entry_latency_at(entry, toks, ctx.batch_size, Some(&ctx))
        } else {
            self.entry_latency_at(entry, point.num_toks, point.num_reqs, None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(m: u64, k: u64, n: u64) -> f64 {
        let inputs = vec![vec![m, k], vec![k, n]];
        let op = OpInstance {
            kind: OpKind::Linear,
            inputs: &inputs,
            scalars: &[],
            attrs: &BTreeMap::new(),
            kernel_symbols: &[],
            dtype_bytes: 2,
            ctx: None,
        };
        oracle_latency(&op, &HardwareSpec::a100(), &BackendSpec {
            name: "x".into(),
            kernel_table: vec![],
            cost_multiplier: BTreeMap::new(),
        })
    }

    #[test]
    fn gemv_is_memory_bound() {
        let inputs = vec![vec![1, 4096], vec![4096, 4096]];
        let op = OpInstance {
            kind: OpKind::Linear,
            inputs: &inputs,
            scalars: &[],
            attrs: &BTreeMap::new(),
            kernel_symbols: &[],
            dtype_bytes: 2,
            ctx: None,
        };
        let (flops, bytes) = op_cost(&op);
        let hw = HardwareSpec::a100();
        assert!(bytes / hw.mem_bw > flops / hw.peak_flops);
        assert!(linear(1, 4096, 4096) > LAUNCH_OVERHEAD_S);
    }

    #[test]
    fn comm_zero_bytes() {
        let hw = HardwareSpec::a100();
        assert_eq!(comm_latency(4, 0, &hw), 1.5 * hw.comm_alpha);
        assert_eq!(comm_latency(1, 1 << 20, &hw), 0.0);
    }
}
