//! Dimension-level taint rules.
//!
//! Dimension-mapping operations (creation, reshape, permute, concat) establish
//! taints explicitly; dimension-preserving operations inherit them by shape
//! matching with a registry fallback.

use crate::taint::{self, combine, Registration, Taint, TaintRegistry, TaintedValue};

use super::TraceError;
use serde::{Deserialize, Serialize};

/// One tensor dimension with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaintedDim {
    pub size: u64,
    pub taint: Taint,
}

impl TaintedDim {
    pub fn new(size: u64, taint: Taint) -> Self {
        Self { size, taint }
    }

    pub fn mc(size: u64) -> Self {
        Self::new(size, Taint::MC)
    }

    fn as_value(&self) -> TaintedValue {
        TaintedValue::new(self.size, self.taint.clone())
    }
}

pub type Shape = Vec<TaintedDim>;

pub fn numel(shape: &[TaintedDim]) -> u64 {
    shape.iter().map(|d| d.size).product()
}

/// Parameters of a dimension-mapping operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapOp<'a> {
    /// Each output dimension comes from one scalar argument.
    Create { sizes: &'a [TaintedValue] },
    /// Target sizes; at most one `-1` (inferred).
    Reshape { target: &'a [i64] },
    Permute { perm: &'a [usize] },
    /// Concatenate all inputs along `dim`.
    Concat { dim: usize },
}

/// Apply a dimension-mapping operation.
///
/// Newly produced dimensions are registered in `reg`; any ambiguity raised by
/// that registration is appended to `ambiguous`.
pub fn map_dims(
    op: &MapOp<'_>,
    inputs: &[Shape],
    reg: &mut TaintRegistry,
    ambiguous: &mut Vec<u64>,
) -> Result<Shape, TraceError> {
    match op {
        MapOp::Create { sizes } => Ok(sizes
            .iter()
            .map(|s| TaintedDim::new(s.value, s.taint.clone()))
            .collect()),
        MapOp::Permute { perm } => {
            let input = single(inputs)?;
            let mut seen = vec![false; input.len()];
            if perm.len() != input.len() {
                return Err(mismatch("permutation rank differs from input rank"));
            }
            for &p in perm.iter() {
                if p >= input.len() || std::mem::replace(&mut seen[p], true) {
                    return Err(mismatch("invalid permutation"));
                }
            }
            Ok(perm.iter().map(|&p| input[p].clone()).collect())
        }
        MapOp::Concat { dim } => concat(inputs, *dim, reg),
        MapOp::Reshape { target } => reshape(single(inputs)?, target, reg, ambiguous),
    }
}

fn single(inputs: &[Shape]) -> Result<&Shape, TraceError> {
    match inputs {
        [one] => Ok(one),
        _ => Err(mismatch("expected exactly one input tensor")),
    }
}

fn mismatch(msg: impl Into<String>) -> TraceError {
    TraceError::ShapeMismatch(msg.into())
}

fn concat(inputs: &[Shape], dim: usize, reg: &TaintRegistry) -> Result<Shape, TraceError> {
    let first = inputs.first().ok_or_else(|| mismatch("concat of nothing"))?;
    if dim >= first.len() {
        return Err(mismatch("concat dim out of range"));
    }
    for s in inputs {
        if s.len() != first.len()
            || s.iter()
                .zip(first)
                .enumerate()
                .any(|(i, (a, b))| i != dim && a.size != b.size)
        {
            return Err(mismatch("concat inputs disagree off the concat dim"));
        }
    }
    let mut out = first.clone();
    let size: u64 = inputs.iter().map(|s| s[dim].size).sum();
    let labels: Vec<&Taint> = inputs.iter().map(|s| &s[dim].taint).collect();
    let taint = if labels.iter().all(|t| **t == *labels[0]) && !matches!(labels[0], Taint::Mix(_)) {
        labels[0].clone()
    } else {
        reg.lookup(size).cloned().unwrap_or_default()
    };
    out[dim] = TaintedDim::new(size, taint);
    Ok(out)
}

/// Resolve the concrete sizes of a reshape target.
pub fn resolve_target(numel: u64, target: &[i64]) -> Result<Vec<u64>, TraceError> {
    let inferred: Vec<usize> = target
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == -1)
        .map(|(i, _)| i)
        .collect();
    if inferred.len() > 1 || target.iter().any(|v| *v == 0 || *v < -1) {
        return Err(mismatch(format!("bad reshape target {target:?}")));
    }
    let known: u64 = target.iter().filter(|v| **v > 0).map(|v| *v as u64).product();
    let mut sizes: Vec<u64> = target.iter().map(|v| (*v).max(0) as u64).collect();
    if let Some(&i) = inferred.first() {
        if !numel.is_multiple_of(known) {
            return Err(mismatch(format!("cannot infer dim: {numel} elements into {target:?}")));
        }
        sizes[i] = numel / known;
    }
    if sizes.iter().product::<u64>() != numel {
        return Err(mismatch(format!("{numel} elements do not fit {target:?}")));
    }
    Ok(sizes)
}

/// Group input and output dims into blocks with equal element counts.
fn reshape_groups(inp: &[u64], out: &[u64]) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let mut groups = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < inp.len() && j < out.len() {
        let (si, sj) = (i, j);
        let mut pi = inp[i];
        let mut po = out[j];
        i += 1;
        j += 1;
        while pi != po {
            if pi < po {
                pi *= inp[i];
                i += 1;
            } else {
                po *= out[j];
                j += 1;
            }
        }
        groups.push((si..i, sj..j));
    }
    // trailing unit dims join the last block
    if let Some(last) = groups.last_mut() {
        last.0.end = inp.len();
        last.1.end = out.len();
    } else if !inp.is_empty() || !out.is_empty() {
        groups.push((0..inp.len(), 0..out.len()));
    }
    groups
}

fn reshape(
    input: &Shape,
    target: &[i64],
    reg: &mut TaintRegistry,
    ambiguous: &mut Vec<u64>,
) -> Result<Shape, TraceError> {
    let sizes = resolve_target(numel(input), target)?;
    let inferred = target.iter().position(|v| *v == -1);
    let in_sizes: Vec<u64> = input.iter().map(|d| d.size).collect();
    let mut out: Vec<Option<TaintedDim>> = vec![None; sizes.len()];

    for (gi, go) in reshape_groups(&in_sizes, &sizes) {
        // merge the input block into one tainted value
        let mut merged = TaintedValue::new(1, Taint::Bot);
        for d in &input[gi.clone()] {
            let t = combine(&merged, &d.as_value()).map_err(TraceError::Taint)?;
            merged = TaintedValue::new(merged.value * d.size, t);
        }
        if gi.len() > 1 {
            note(reg.register(merged.value, merged.taint.clone()), ambiguous);
        }
        if go.len() == 1 {
            out[go.start] = Some(TaintedDim::new(merged.value, merged.taint.clone()));
            continue;
        }
        // split: peel known components off a MIX, registry for the rest
        let mut residual = merged.taint.clone();
        let mut pending_inferred = None;
        for k in go.clone() {
            if Some(k) == inferred {
                pending_inferred = Some(k);
                continue;
            }
            let size = sizes[k];
            let taint = match residual.as_mix().and_then(|m| m.get(size)) {
                Some(_) => {
                    let (comp, rest) = taint::split(&residual, size).map_err(TraceError::Taint)?;
                    residual = rest;
                    comp
                }
                None => lookup(reg, size),
            };
            out[k] = Some(TaintedDim::new(size, taint));
        }
        if let Some(k) = pending_inferred {
            let size = sizes[k];
            let residual_fits = match &residual {
                Taint::Mix(m) => m.product() == size,
                Taint::Base(_) => merged.taint.as_mix().is_some_and(|m| m.iter().any(|(v, _)| v == size)),
                Taint::Bot => false,
            };
            let taint = if residual_fits { residual.clone() } else { lookup(reg, size) };
            out[k] = Some(TaintedDim::new(size, taint));
        }
        for k in go {
            if let Some(d) = &out[k] {
                note(reg.register(d.size, d.taint.clone()), ambiguous);
            }
        }
    }
    Ok(out
        .into_iter()
        .zip(sizes)
        .map(|(d, s)| d.unwrap_or_else(|| TaintedDim::new(s, Taint::Bot)))
        .collect())
}

fn lookup(reg: &TaintRegistry, size: u64) -> Taint {
    reg.lookup(size).cloned().unwrap_or_default()
}

fn note(r: Registration, ambiguous: &mut Vec<u64>) {
    if let Registration::AmbiguityDetected(v) = r {
        if !ambiguous.contains(&v) {
            ambiguous.push(v);
        }
    }
}

/// How a dimension-preserving operation lays out its output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PreserveKind<'a> {
    /// Output has the shape of the first input.
    Elementwise,
    /// `[.., a, k] x [k, b] -> [.., a, b]`, taints inherited positionally.
    Matmul,
    /// Output sizes are given; taints found by size matching.
    Sized(&'a [u64]),
}

/// Taints for the output of a dimension-preserving operation.
///
/// Output dims inherit from the first size-matching input dim in argument
/// order; unmatched dims fall back to the registry, then to `Bot`.
pub fn preserve_dims(
    kind: &PreserveKind<'_>,
    inputs: &[Shape],
    reg: &TaintRegistry,
) -> Result<Shape, TraceError> {
    match kind {
        PreserveKind::Elementwise => inputs
            .first()
            .cloned()
            .ok_or_else(|| mismatch("elementwise op without inputs")),
        PreserveKind::Matmul => {
            let (a, b) = match inputs {
                [a, b, ..] => (a, b),
                _ => return Err(mismatch("matmul needs two inputs")),
            };
            if a.is_empty() || b.len() != 2 || a[a.len() - 1].size != b[0].size {
                return Err(mismatch(format!(
                    "matmul {:?} x {:?}",
                    a.iter().map(|d| d.size).collect::<Vec<_>>(),
                    b.iter().map(|d| d.size).collect::<Vec<_>>()
                )));
            }
            let mut out = a[..a.len() - 1].to_vec();
            out.push(b[1].clone());
            Ok(out)
        }
        PreserveKind::Sized(sizes) => Ok(sizes
            .iter()
            .map(|&s| {
                let inherited = inputs
                    .iter()
                    .flatten()
                    .find(|d| d.size == s)
                    .map(|d| d.taint.clone());
                TaintedDim::new(s, inherited.unwrap_or_else(|| lookup(reg, s)))
            })
            .collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(size: u64, t: &str) -> TaintedDim {
        TaintedDim::new(size, t.parse().unwrap())
    }

    #[test]
    fn flatten_builds_mix() {
        let mut reg = TaintRegistry::new();
        let mut amb = vec![];
        let out = map_dims(
            &MapOp::Reshape { target: &[-1] },
            &[vec![d(269, "NT"), d(40, "MC")]],
            &mut reg,
            &mut amb,
        )
        .unwrap();
        assert_eq!(out, vec![d(10760, "MIX{40:MC,269:NT}")]);
        assert_eq!(reg.lookup(10760).unwrap().to_string(), "MIX{40:MC,269:NT}");
    }

    #[test]
    fn split_recovers_from_mix() {
        let mut reg = TaintRegistry::new();
        let mut amb = vec![];
        let out = map_dims(
            &MapOp::Reshape { target: &[-1, 40] },
            &[vec![d(10760, "MIX{40:MC,269:NT}")]],
            &mut reg,
            &mut amb,
        )
        .unwrap();
        assert_eq!(out, vec![d(269, "NT"), d(40, "MC")]);
    }

    #[test]
    fn heads_view_uses_registry() {
        let mut reg = TaintRegistry::new();
        reg.register(32, Taint::MC);
        reg.register(128, Taint::MC);
        let mut amb = vec![];
        let out = map_dims(
            &MapOp::Reshape { target: &[-1, 32, 128] },
            &[vec![d(538, "NT"), d(4096, "MC")]],
            &mut reg,
            &mut amb,
        )
        .unwrap();
        assert_eq!(out, vec![d(538, "NT"), d(32, "MC"), d(128, "MC")]);
    }

    #[test]
    fn create_tags_from_scalars() {
        let mut reg = TaintRegistry::new();
        let mut amb = vec![];
        let s = [TaintedValue::new(2, Taint::NR), TaintedValue::new(4096, Taint::MC)];
        let out = map_dims(&MapOp::Create { sizes: &s }, &[], &mut reg, &mut amb).unwrap();
        assert_eq!(out, vec![d(2, "NR"), d(4096, "MC")]);
    }

    #[test]
    fn reshape_count_mismatch() {
        let mut reg = TaintRegistry::new();
        let mut amb = vec![];
        let err = map_dims(&MapOp::Reshape { target: &[7, -1] }, &[vec![d(10, "NT")]], &mut reg, &mut amb);
        assert!(matches!(err, Err(TraceError::ShapeMismatch(_))));
    }

    #[test]
    fn permute_and_concat() {
        let mut reg = TaintRegistry::new();
        let mut amb = vec![];
        let x = vec![d(538, "NT"), d(32, "MC"), d(128, "MC")];
        let p = map_dims(&MapOp::Permute { perm: &[1, 0, 2] }, std::slice::from_ref(&x), &mut reg, &mut amb).unwrap();
        assert_eq!(p[0], d(32, "MC"));
        let c = map_dims(
            &MapOp::Concat { dim: 1 },
            &[vec![d(538, "NT"), d(4096, "MC")], vec![d(538, "NT"), d(1024, "MC")]],
            &mut reg,
            &mut amb,
        )
        .unwrap();
        assert_eq!(c, vec![d(538, "NT"), d(5120, "MC")]);
    }

    #[test]
    fn matmul_positional() {
        let reg = TaintRegistry::new();
        let out = preserve_dims(
            &PreserveKind::Matmul,
            &[vec![d(538, "NT"), d(4096, "MC")], vec![d(4096, "MC"), d(14336, "MC")]],
            &reg,
        )
        .unwrap();
        assert_eq!(out, vec![d(538, "NT"), d(14336, "MC")]);
    }

    #[test]
    fn sized_output_falls_back_to_registry() {
        let mut reg = TaintRegistry::new();
        reg.register(4096, Taint::MC);
        let out = preserve_dims(
            &PreserveKind::Sized(&[538, 4096, 7]),
            &[vec![d(538, "NT"), d(8192, "MC")]],
            &reg,
        )
        .unwrap();
        assert_eq!(out, vec![d(538, "NT"), d(4096, "MC"), d(7, "BOT")]);
    }

    #[test]
    fn elementwise_keeps_taints() {
        let reg = TaintRegistry::new();
        let x = vec![d(538, "NT"), d(4096, "MC")];
        assert_eq!(preserve_dims(&PreserveKind::Elementwise, &[x.clone(), x.clone()], &reg).unwrap(), x);
    }
}
