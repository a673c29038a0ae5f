//! Per-signature latency regressors.
//!
//! Attention modules get one polynomial least-squares model per phase over
//! `[prefill_toks, batch_size, chunk, kv_bytes]` (terms: affine, squares,
//! pairwise products). Everything else is interpolated piecewise-linearly
//! over the workload axes it was swept on, which is exact wherever the
//! measured latency is affine between grid points.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::modelir::Phase;
use crate::num::Scalar;
use crate::opset::{stage2, RunnableEntry, Stage2, WorkloadPoint};
use crate::profiler::{db::LatencyRecord, signature::hex, Hash};
use crate::tracer::AttrValue;

/// Smallest latency a regressor reports, in seconds.
pub const LATENCY_FLOOR_S: f64 = 1e-7;

pub const ATTENTION_FEATURES: [&str; 4] = ["prefill_toks", "batch_size", "chunk", "kv_bytes"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("signature {signature}: {have} measurements, need {need} ({detail})")]
    InsufficientData {
        signature: String,
        have: usize,
        need: usize,
        detail: String,
    },
    #[error("signature {0}: measurements do not form a complete grid")]
    IncompleteGrid(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("no regressor for signature {0}")]
pub struct UnknownSignature(pub String);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<S> {
    pub seconds: S,
    /// The query lies outside the training feature box.
    pub extrapolated: bool,
    /// The raw prediction fell below [`LATENCY_FLOOR_S`].
    pub clamped: bool,
}

/// Multilinear interpolation on a rectilinear grid. Queries outside the grid
/// extend the boundary segment linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GridInterp<S: Scalar> {
    pub axes: Vec<Vec<S>>,
    /// Row-major over `axes`.
    pub values: Vec<S>,
}

impl<S: Scalar> GridInterp<S> {
    /// `points` maps axis coordinates to values; every grid cell must be present.
    pub fn from_points(points: &BTreeMap<Vec<u64>, S>) -> Option<Self> {
        let dims = points.keys().next()?.len();
        let axes_u: Vec<Vec<u64>> = (0..dims)
            .map(|d| points.keys().map(|k| k[d]).collect::<BTreeSet<_>>().into_iter().collect())
            .collect();
        let cells: usize = axes_u.iter().map(Vec::len).product();
        if cells != points.len() {
            return None;
        }
        let values = points.values().copied().collect();
        Some(Self {
            axes: axes_u.iter().map(|a| a.iter().map(|v| S::of_u64(*v)).collect()).collect(),
            values,
        })
    }

    fn segment(axis: &[S], x: S) -> (usize, S, bool) {
        if axis.len() == 1 {
            return (0, S::zero(), x != axis[0]);
        }
        let outside = x < axis[0] || x > axis[axis.len() - 1];
        let i = match axis.iter().position(|a| *a > x) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => axis.len() - 2,
        };
        let t = (x - axis[i]) / (axis[i + 1] - axis[i]);
        (i, t, outside)
    }

    /// Value at `x` and whether any coordinate left the grid.
    pub fn eval(&self, x: &[S]) -> (S, bool) {
        let segs: Vec<(usize, S, bool)> = self.axes.iter().zip(x).map(|(a, v)| Self::segment(a, *v)).collect();
        let outside = segs.iter().any(|s| s.2);
        let mut total = S::zero();
        for corner in 0..(1usize << self.axes.len()) {
            let mut weight = S::one();
            let mut idx = 0;
            for (d, (i, t, _)) in segs.iter().enumerate() {
                let hi = corner >> d & 1 == 1;
                let n = self.axes[d].len();
                if n == 1 {
                    if hi {
                        weight = S::zero();
                    }
                    idx *= 1;
                    continue;
                }
                weight = weight * if hi { *t } else { S::one() - *t };
                idx = idx * n + i + usize::from(hi);
            }
            if weight != S::zero() {
                total = total + weight * self.values[idx];
            }
        }
        (total, outside)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Const,
    Lin(usize),
    Sq(usize),
    Prod(usize, usize),
}

/// Quadratic least squares over standardized features, weighted so the
/// residual is relative to the target. With `divisor = Some(d)` the quadratic
/// models `y * x[d]` and predictions divide by `x[d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PolyFit<S: Scalar> {
    pub divisor: Option<usize>,
    pub mean: Vec<S>,
    pub scale: Vec<S>,
    pub terms: Vec<Term>,
    pub coef: Vec<S>,
    pub lo: Vec<S>,
    pub hi: Vec<S>,
}

impl<S: Scalar> PolyFit<S> {
    pub fn fit(xs: &[Vec<S>], ys: &[S], divisor: Option<usize>) -> Self {
        let dims = xs[0].len();
        let n = S::of_u64(xs.len() as u64);
        let mut mean = vec![S::zero(); dims];
        let mut scale = vec![S::zero(); dims];
        let mut lo = xs[0].clone();
        let mut hi = xs[0].clone();
        for x in xs {
            for d in 0..dims {
                mean[d] = mean[d] + x[d] / n;
                lo[d] = lo[d].min(x[d]);
                hi[d] = hi[d].max(x[d]);
            }
        }
        for x in xs {
            for d in 0..dims {
                scale[d] = scale[d] + (x[d] - mean[d]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = s.sqrt();
        }
        let live: Vec<usize> = (0..dims).filter(|d| scale[*d] > S::zero()).collect();
        let mut terms = vec![Term::Const];
        terms.extend(live.iter().map(|d| Term::Lin(*d)));
        terms.extend(live.iter().map(|d| Term::Sq(*d)));
        for (i, a) in live.iter().enumerate() {
            for b in &live[i + 1..] {
                terms.push(Term::Prod(*a, *b));
            }
        }
        let mut fit = Self {
            divisor,
            mean,
            scale,
            terms,
            coef: Vec::new(),
            lo,
            hi,
        };
        let rows: Vec<Vec<S>> = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let target = *y * divisor.map_or(S::one(), |d| x[d]);
                fit.row(x).into_iter().map(|v| v / target).collect()
            })
            .collect();
        let rhs = vec![S::one(); ys.len()];
        let (kept, coef) = least_squares(&rows, &rhs);
        fit.terms = kept.iter().map(|i| fit.terms[*i]).collect();
        fit.coef = coef;
        fit
    }

    fn row(&self, x: &[S]) -> Vec<S> {
        let z = |d: usize| {
            if self.scale[d] > S::zero() {
                (x[d] - self.mean[d]) / self.scale[d]
            } else {
                S::zero()
            }
        };
        self.terms
            .iter()
            .map(|t| match *t {
                Term::Const => S::one(),
                Term::Lin(d) => z(d),
                Term::Sq(d) => z(d) * z(d),
                Term::Prod(a, b) => z(a) * z(b),
            })
            .collect()
    }

    pub fn eval(&self, x: &[S]) -> (S, bool) {
        let mut y = self.row(x).iter().zip(&self.coef).fold(S::zero(), |acc, (r, c)| acc + *r * *c);
        if let Some(d) = self.divisor {
            y = y / x[d];
        }
        let outside = x.iter().enumerate().any(|(d, v)| *v < self.lo[d] || *v > self.hi[d]);
        (y, outside)
    }
}

/// Least squares via modified Gram-Schmidt. Columns that are numerically
/// dependent on earlier ones are dropped; returns kept column indices and
/// their coefficients.
pub fn least_squares<S: Scalar>(rows: &[Vec<S>], rhs: &[S]) -> (Vec<usize>, Vec<S>) {
    let m = rows.len();
    let cols = rows.first().map_or(0, Vec::len);
    let mut q: Vec<Vec<S>> = Vec::new();
    let mut r: Vec<Vec<S>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..cols {
        let mut v: Vec<S> = rows.iter().map(|row| row[j]).collect();
        let norm0 = v.iter().fold(S::zero(), |a, x| a + *x * *x).sqrt();
        let mut rcol = Vec::with_capacity(q.len() + 1);
        for qk in &q {
            let dot = qk.iter().zip(&v).fold(S::zero(), |a, (x, y)| a + *x * *y);
            for i in 0..m {
                v[i] = v[i] - dot * qk[i];
            }
            rcol.push(dot);
        }
        let norm = v.iter().fold(S::zero(), |a, x| a + *x * *x).sqrt();
        if norm0 == S::zero() || norm <= S::rank_eps() * norm0 {
            continue;
        }
        for x in &mut v {
            *x = *x / norm;
        }
        rcol.push(norm);
        q.push(v);
        r.push(rcol);
        kept.push(j);
    }
    let qty: Vec<S> = q
        .iter()
        .map(|qk| qk.iter().zip(rhs).fold(S::zero(), |a, (x, y)| a + *x * *y))
        .collect();
    let k = kept.len();
    let mut coef = vec![S::zero(); k];
    for i in (0..k).rev() {
        let mut s = qty[i];
        for j in i + 1..k {
            s = s - r[j][i] * coef[j];
        }
        coef[i] = s / r[i][i];
    }
    (kept, coef)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
#[allow(clippy::large_enum_variant)]
pub enum RegModel<S: Scalar> {
    Interp(GridInterp<S>),
    Attention { prefill: PolyFit<S>, decode: PolyFit<S> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Regressor<S: Scalar = f64> {
    #[serde(with = "crate::profiler::db::hash_hex")]
    pub signature_hash: Hash,
    pub feature_names: Vec<String>,
    pub model: RegModel<S>,
    /// Training MAPE.
    pub fit_error: S,
    pub measurement_count: usize,
}

/// How an entry's latency is parameterised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryClass {
    Attention,
    /// Context-dependent, depends on the batch token count only.
    TokenModule,
    Stateless,
}

pub fn classify(entry: &RunnableEntry) -> EntryClass {
    match (entry.context_required, entry.stateful_kind()) {
        (true, Some("attention")) => EntryClass::Attention,
        (true, _) => EntryClass::TokenModule,
        _ => EntryClass::Stateless,
    }
}

/// Per-layer KV bytes per cached token of an attention entry.
pub fn kv_token_bytes(entry: &RunnableEntry, dtype_bytes: u64) -> u64 {
    let get = |k: &str| entry.attrs.get(k).and_then(AttrValue::as_int).unwrap_or(0) as u64;
    2 * get("num_kv_heads") * get("head_size") * dtype_bytes
}

/// Attention features for one phase of a batch.
pub fn attention_features<S: Scalar>(ctx: &Stage2, chunk: u64, kv_token_bytes: u64) -> [S; 4] {
    let toks: u64 = ctx.query_lens.iter().sum();
    let cached: u64 = ctx.seq_lens.iter().zip(&ctx.query_lens).map(|(s, q)| s - q).sum();
    [
        S::of_u64(toks),
        S::of_u64(ctx.batch_size),
        S::of_u64(chunk),
        S::of_u64(cached * kv_token_bytes),
    ]
}

fn mape_of<S: Scalar>(pairs: impl Iterator<Item = (S, S)>) -> S {
    let mut n = 0u64;
    let mut acc = S::zero();
    for (p, t) in pairs {
        acc = acc + ((p - t) / t).abs();
        n += 1;
    }
    if n == 0 {
        S::zero()
    } else {
        acc / S::of_u64(n)
    }
}

fn need(features: usize) -> usize {
    4.max(features + 1)
}

fn short(hash: &Hash, have: usize, need: usize, detail: &str) -> FitError {
    FitError::InsufficientData {
        signature: hex(hash),
        have,
        need,
        detail: detail.to_string(),
    }
}

/// Fit one signature from its measurements.
pub fn fit_signature<S: Scalar>(
    hash: &Hash,
    entry: &RunnableEntry,
    records: &[LatencyRecord],
    dtype_bytes: u64,
) -> Result<Regressor<S>, FitError> {
    match classify(entry) {
        EntryClass::Attention => fit_attention(hash, entry, records, dtype_bytes),
        EntryClass::TokenModule => {
            let base = records
                .iter()
                .filter(|r| r.workload.phase == Phase::Prefill)
                .map(|r| (r.workload.num_reqs, r.workload.kv_len))
                .min();
            let subset: Vec<&LatencyRecord> = records
                .iter()
                .filter(|r| r.workload.phase == Phase::Prefill && Some((r.workload.num_reqs, r.workload.kv_len)) == base)
                .collect();
            fit_interp(hash, &subset, &["num_toks"], records.len())
        }
        EntryClass::Stateless => {
            let varies = |f: fn(&WorkloadPoint) -> u64| records.iter().map(|r| f(&r.workload)).collect::<BTreeSet<_>>().len() > 1;
            let mut axes = Vec::new();
            if varies(|w| w.num_toks) {
                axes.push("num_toks");
            }
            if varies(|w| w.num_reqs) {
                axes.push("num_reqs");
            }
            if axes.is_empty() {
                axes.push("num_toks");
            }
            let all: Vec<&LatencyRecord> = records.iter().collect();
            fit_interp(hash, &all, &axes, records.len())
        }
    }
}

fn coord(w: &WorkloadPoint, axis: &str) -> u64 {
    if axis == "num_reqs" {
        w.num_reqs
    } else {
        w.num_toks
    }
}

fn fit_interp<S: Scalar>(hash: &Hash, records: &[&LatencyRecord], axes: &[&str], total: usize) -> Result<Regressor<S>, FitError> {
    let required = need(axes.len());
    if records.len() < required {
        return Err(short(hash, records.len(), required, "grid points on the swept axes"));
    }
    let points: BTreeMap<Vec<u64>, S> = records
        .iter()
        .map(|r| (axes.iter().map(|a| coord(&r.workload, a)).collect(), S::of(r.latency_s)))
        .collect();
    let grid = GridInterp::from_points(&points).ok_or_else(|| FitError::IncompleteGrid(hex(hash)))?;
    let fit_error = mape_of(points.iter().map(|(k, v)| {
        let x: Vec<S> = k.iter().map(|c| S::of_u64(*c)).collect();
        (grid.eval(&x).0, *v)
    }));
    Ok(Regressor {
        signature_hash: *hash,
        feature_names: axes.iter().map(|a| a.to_string()).collect(),
        model: RegModel::Interp(grid),
        fit_error,
        measurement_count: total,
    })
}

fn fit_attention<S: Scalar>(hash: &Hash, entry: &RunnableEntry, records: &[LatencyRecord], dtype_bytes: u64) -> Result<Regressor<S>, FitError> {
    let kvb = kv_token_bytes(entry, dtype_bytes);
    let mut fits = Vec::new();
    let mut errors = S::zero();
    for phase in Phase::BOTH {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in records.iter().filter(|r| r.workload.phase == phase) {
            xs.push(attention_features::<S>(&stage2(&r.workload), r.workload.chunk, kvb).to_vec());
            ys.push(S::of(r.latency_s));
        }
        let required = need(ATTENTION_FEATURES.len());
        if xs.len() < required {
            return Err(short(hash, xs.len(), required, &format!("{} records", phase.as_str())));
        }
        let fit = PolyFit::fit(&xs, &ys, Some(1));
        let err = mape_of(xs.iter().zip(&ys).map(|(x, y)| (fit.eval(x).0.max(S::of(LATENCY_FLOOR_S)), *y)));
        errors = errors + err * S::of_u64(xs.len() as u64);
        fits.push(fit);
    }
    let decode = fits.pop().expect("two phases");
    let prefill = fits.pop().expect("two phases");
    Ok(Regressor {
        signature_hash: *hash,
        feature_names: ATTENTION_FEATURES.iter().map(|s| s.to_string()).collect(),
        model: RegModel::Attention { prefill, decode },
        fit_error: errors / S::of_u64(records.len() as u64),
        measurement_count: records.len(),
    })
}

impl<S: Scalar> Regressor<S> {
    /// `x` follows `feature_names`; `phase` selects the attention model.
    pub fn predict(&self, x: &[S], phase: Phase) -> Prediction<S> {
        let (raw, extrapolated) = match &self.model {
            RegModel::Interp(g) => g.eval(x),
            RegModel::Attention { prefill, decode } => match phase {
                Phase::Prefill => prefill.eval(x),
                Phase::Decode => decode.eval(x),
            },
        };
        let floor = S::of(LATENCY_FLOOR_S);
        let clamped = raw.partial_cmp(&floor).is_none_or(|o| o == std::cmp::Ordering::Less);
        Prediction {
            seconds: if clamped { floor } else { raw },
            extrapolated,
            clamped,
        }
    }
}

/// Regressors keyed by signature hash.
#[derive(Debug, Clone, Default)]
pub struct Regressors<S: Scalar = f64> {
    pub by_hash: BTreeMap<Hash, Regressor<S>>,
}

impl<S: Scalar> Regressors<S> {
    pub fn get(&self, hash: &Hash) -> Result<&Regressor<S>, UnknownSignature> {
        self.by_hash.get(hash).ok_or_else(|| UnknownSignature(hex(hash)))
    }

    pub fn predict(&self, hash: &Hash, x: &[S], phase: Phase) -> Result<Prediction<S>, UnknownSignature> {
        Ok(self.get(hash)?.predict(x, phase))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_exact_on_affine() {
        let mut pts = BTreeMap::new();
        for x in [1u64, 4, 16] {
            for y in [1u64, 8] {
                pts.insert(vec![x, y], 3.0 * x as f64 + 2.0 * y as f64 + 1.0);
            }
        }
        let g = GridInterp::<f64>::from_points(&pts).unwrap();
        let (v, out) = g.eval(&[10.0, 5.0]);
        assert!((v - 41.0).abs() < 1e-12);
        assert!(!out);
        let (v, out) = g.eval(&[20.0, 5.0]);
        assert!((v - 71.0).abs() < 1e-9);
        assert!(out);
    }

    #[test]
    fn missing_cell_rejected() {
        let pts = BTreeMap::from([(vec![1u64, 1], 1.0), (vec![2, 2], 2.0), (vec![1, 2], 3.0)]);
        assert!(GridInterp::<f64>::from_points(&pts).is_none());
    }

    #[test]
    fn quadratic_recovered() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for a in 1..6 {
            for b in 1..5 {
                let (a, b) = (a as f64, b as f64);
                xs.push(vec![a, b, 7.0]);
                ys.push(1.0 + a * a + 0.5 * a * b + 2.0 * b);
            }
        }
        let f = PolyFit::fit(&xs, &ys, None);
        let (y, out) = f.eval(&[2.5, 3.5, 7.0]);
        assert!((y - (1.0 + 6.25 + 0.5 * 2.5 * 3.5 + 7.0)).abs() < 1e-9);
        assert!(!out);
        assert!(f.eval(&[9.0, 1.0, 7.0]).1);
    }

    #[test]
    fn generic_in_f32() {
        let pts = BTreeMap::from([(vec![1u64], 1.0f32), (vec![3], 5.0)]);
        let g = GridInterp::<f32>::from_points(&pts).unwrap();
        assert!((g.eval(&[2.0]).0 - 3.0).abs() < 1e-6);
    }
}
