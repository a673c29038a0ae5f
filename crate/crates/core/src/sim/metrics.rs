//! Request-level metrics, percentiles, MAPE and CSV/JSON/SVG export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::num::Scalar;

pub const PERCENTILES: [f64; 6] = [25.0, 50.0, 75.0, 90.0, 95.0, 99.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MapeError {
    #[error("series lengths differ: {pred} predicted vs {truth} truth")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("truth value at index {0} is not positive")]
    ZeroTruth(usize),
}

/// `mean(|p - t| / t)`.
pub fn mape<S: Scalar>(pred: &[S], truth: &[S]) -> Result<S, MapeError> {
    if pred.len() != truth.len() {
        return Err(MapeError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if let Some(i) = truth.iter().position(|t| t.partial_cmp(&S::zero()) != Some(std::cmp::Ordering::Greater)) {
        return Err(MapeError::ZeroTruth(i));
    }
    if pred.is_empty() {
        return Ok(S::zero());
    }
    let sum = pred.iter().zip(truth).fold(S::zero(), |a, (p, t)| a + ((*p - *t) / *t).abs());
    Ok(sum / S::of_u64(pred.len() as u64))
}

/// Linear-interpolated percentile (`p` in 0..=100) of an unsorted sample.
pub fn percentile<S: Scalar>(values: &[S], p: S) -> Option<S> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in metrics"));
    let rank = p / S::of(100.0) * S::of_u64(v.len() as u64 - 1);
    let lo = rank.floor();
    let i = lo.to_usize().unwrap_or(0).min(v.len() - 1);
    let j = (i + 1).min(v.len() - 1);
    Some(v[i] + (v[j] - v[i]) * (rank - lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: usize,
    pub arrival_s: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub first_token_s: f64,
    pub finish_s: f64,
    pub ttft_s: f64,
    /// Only for requests with at least two output tokens.
    pub tpot_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub requests: Vec<RequestMetrics>,
    /// `(iteration start, scheduled requests)`.
    pub schedule: Vec<(f64, u64)>,
    pub iterations: usize,
    pub makespan_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub iterations: usize,
    pub makespan_s: f64,
    pub ttft: Vec<(f64, f64)>,
    pub tpot: Vec<(f64, f64)>,
}

impl Metrics {
    pub fn ttfts(&self) -> Vec<f64> {
        self.requests.iter().map(|r| r.ttft_s).collect()
    }

    pub fn tpots(&self) -> Vec<f64> {
        self.requests.iter().filter_map(|r| r.tpot_s).collect()
    }

    pub fn ttft_percentiles(&self) -> Vec<(f64, f64)> {
        pcts(&self.ttfts())
    }

    pub fn tpot_percentiles(&self) -> Vec<(f64, f64)> {
        pcts(&self.tpots())
    }

    pub fn summary(&self) -> Summary {
        Summary {
            requests: self.requests.len(),
            iterations: self.iterations,
            makespan_s: self.makespan_s,
            ttft: self.ttft_percentiles(),
            tpot: self.tpot_percentiles(),
        }
    }

    /// Per-request rows followed by percentile rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,id,arrival_s,prompt_tokens,output_tokens,ttft_s,tpot_s\n");
        for r in &self.requests {
            let tpot = r.tpot_s.map(|t| format!("{t:.9}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "request,{},{:.9},{},{},{:.9},{}",
                r.id, r.arrival_s, r.prompt_tokens, r.output_tokens, r.ttft_s, tpot
            );
        }
        let ttft = self.ttft_percentiles();
        let tpot = self.tpot_percentiles();
        for (i, (p, v)) in ttft.iter().enumerate() {
            let tp = tpot.get(i).map(|x| format!("{:.9}", x.1)).unwrap_or_default();
            let _ = writeln!(out, "p{p},,,,,{v:.9},{tp}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes") + "\n"
    }
}

fn pcts(v: &[f64]) -> Vec<(f64, f64)> {
    PERCENTILES
        .iter()
        .filter_map(|p| percentile(v, *p).map(|x| (*p, x)))
        .collect()
}

/// MAPE between two metric sets at each reported percentile.
pub fn percentile_errors(pred: &[(f64, f64)], truth: &[(f64, f64)]) -> Vec<(f64, f64)> {
    pred.iter()
        .zip(truth)
        .map(|((p, a), (_, b))| (*p, ((a - b) / b).abs()))
        .collect()
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

/// Minimal SVG line chart; each series is `(label, points)`.
pub fn svg_lines(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, 0.0f64, f64::MIN);
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x0 > x1 {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>", W / 2.0);
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>", W / 2.0, H - 10.0);
    let _ = writeln!(s, "<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {0})\" text-anchor=\"middle\">{y_label}</text>", H / 2.0);
    let _ = writeln!(s, "<text x=\"{PAD}\" y=\"{}\">{x0:.3}</text><text x=\"{}\" y=\"{0}\" text-anchor=\"end\">{x1:.3}</text>", H - PAD + 15.0, W - PAD);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{PAD}\" text-anchor=\"end\">{y1:.3}</text>", PAD - 4.0);
    for (i, (label, points)) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let path: Vec<String> = points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" points=\"{}\"/>", path.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{label}</text>", W - PAD - 120.0, PAD + 15.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

/// Empirical CDF points of a sample.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mape_examples() {
        assert!((mape(&[10.0f64, 20.0], &[10.0, 25.0]).unwrap() - 0.10).abs() < 1e-12);
        assert_eq!(mape(&[3.0f32], &[3.0]).unwrap(), 0.0);
        assert_eq!(mape(&[1.0], &[0.0]), Err(MapeError::ZeroTruth(0)));
        assert_eq!(mape(&[1.0], &[]), Err(MapeError::LengthMismatch { pred: 1, truth: 0 }));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 50.0), Some(2.5));
        assert_eq!(percentile(&v, 100.0), Some(4.0));
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile::<f64>(&[], 50.0), None);
    }
}
