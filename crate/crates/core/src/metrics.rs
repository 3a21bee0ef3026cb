//! Summary-overlap and rank-correlation metrics over per-segment scores.
//!
//! Every ranking breaks ties by earlier index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("empty score sequence")]
    Empty,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("need at least 2 segments, got {0}")]
    TooShort(usize),

    #[error("fraction must lie in (0, 1]")]
    InvalidFraction,

    #[error("ground-truth summary has no positives")]
    NoPositives,

    #[error("constant input: rank correlation undefined")]
    ConstantInput,

    #[error("non-finite score at index {0}")]
    NonFinite(usize),
}

type Result<T> = std::result::Result<T, MetricError>;

fn check(y: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    match y.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(MetricError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    check(a)?;
    check(b)?;
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Indices sorted by descending score; equal scores keep index order.
pub fn rank_order(y: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| y[b].total_cmp(&y[a]));
    idx
}

/// Summary size `floor(fraction * n)`; the small slack keeps e.g. `0.15 * 20` at 3.
pub fn summary_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Marks the top `floor(fraction * n)` segments.
pub fn binary_summary(y: &[f64], fraction: f64) -> Result<Vec<bool>> {
    check(y)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricError::InvalidFraction);
    }
    let mut mask = vec![false; y.len()];
    for &i in rank_order(y).iter().take(summary_size(y.len(), fraction)) {
        mask[i] = true;
    }
    Ok(mask)
}

pub fn f1_at_50(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    let p = binary_summary(pred, 0.5)?;
    let g = binary_summary(gt, 0.5)?;
    let overlap = p.iter().zip(&g).filter(|(a, b)| **a && **b).count() as f64;
    let (np, ng) = (
        p.iter().filter(|&&x| x).count() as f64,
        g.iter().filter(|&&x| x).count() as f64,
    );
    let precision = if np > 0.0 { overlap / np } else { 0.0 };
    let recall = if ng > 0.0 { overlap / ng } else { 0.0 };
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Average precision of the `pred` ranking against the top-`rho` gt segments.
pub fn map_at_rho(pred: &[f64], gt: &[f64], rho: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let positive = binary_summary(gt, rho)?;
    let n_pos = positive.iter().filter(|&&x| x).count();
    if n_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (r, &i) in rank_order(pred).iter().enumerate() {
        if positive[i] {
            hits += 1;
            total += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

/// 1-based ranks in ascending order; ties share their mean rank.
pub fn average_ranks(y: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let mut ranks = vec![0.0; y.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && y[idx[end]] == y[idx[start]] {
            end += 1;
        }
        let mean = (start + end + 1) as f64 / 2.0;
        idx[start..end].iter().for_each(|&i| ranks[i] = mean);
        start = end;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricError::ConstantInput);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman_rho(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.len() < 2 {
        return Err(MetricError::TooShort(pred.len()));
    }
    pearson(&average_ranks(pred), &average_ranks(gt))
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Counts pairs `i < j` with `v[i] > v[j]`, sorting `v` in place.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b via Knight's O(n log n) algorithm.
pub fn kendall_tau(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = pred.len();
    if n < 2 {
        return Err(MetricError::TooShort(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]).then(gt[a].total_cmp(&gt[b])));

    let n0 = (n * (n - 1) / 2) as u64;
    let xs: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
    let n1 = tied_pairs(&xs);
    let mut joint = 0;
    let mut run = 1u64;
    for w in idx.windows(2) {
        if pred[w[0]] == pred[w[1]] && gt[w[0]] == gt[w[1]] {
            run += 1;
        } else {
            joint += run * (run - 1) / 2;
            run = 1;
        }
    }
    let n3 = joint + run * (run - 1) / 2;

    let mut ys: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
    let swaps = merge_count(&mut ys, &mut Vec::with_capacity(n));
    let n2 = tied_pairs(&ys);

    if n1 == n0 || n2 == n0 {
        return Err(MetricError::ConstantInput);
    }
    let num = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    let den = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok((num as f64 / den).clamp(-1.0, 1.0))
}

/// All five scores for one video; undefined entries are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    #[serde(rename = "F1")]
    pub f1: Option<f64>,
    #[serde(rename = "mAP50")]
    pub map50: Option<f64>,
    #[serde(rename = "mAP15")]
    pub map15: Option<f64>,
    pub rho: Option<f64>,
    pub tau: Option<f64>,
}

pub const COLUMNS: [&str; 5] = ["F1", "mAP50", "mAP15", "rho", "tau"];

impl VideoMetrics {
    pub fn compute(pred: &[f64], gt: &[f64]) -> Result<Self> {
        check_pair(pred, gt)?;
        Ok(Self {
            f1: f1_at_50(pred, gt).ok(),
            map50: map_at_rho(pred, gt, 0.5).ok(),
            map15: map_at_rho(pred, gt, 0.15).ok(),
            rho: spearman_rho(pred, gt).ok(),
            tau: kendall_tau(pred, gt).ok(),
        })
    }

    pub fn values(&self) -> [Option<f64>; 5] {
        [self.f1, self.map50, self.map15, self.rho, self.tau]
    }
}

/// Means over the defined per-video values, in input order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    #[serde(flatten)]
    pub mean: VideoMetrics,
    pub videos: usize,
    /// Videos for which each metric was undefined, in column order.
    pub undefined: [usize; 5],
}

impl MetricsSummary {
    pub fn aggregate(per_video: &[VideoMetrics]) -> Self {
        let mut sums = [0.0; 5];
        let mut counts = [0usize; 5];
        for m in per_video {
            for (k, v) in m.values().iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
        }
        let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
        Self {
            mean: VideoMetrics {
                f1: mean(0),
                map50: mean(1),
                map15: mean(2),
                rho: mean(3),
                tau: mean(4),
            },
            videos: per_video.len(),
            undefined: std::array::from_fn(|k| per_video.len() - counts[k]),
        }
    }
}

pub fn format_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |v| format!("{v:.4}"))
}

/// Plain-text table: one row per labelled metric set.
pub fn format_table(label_header: &str, rows: &[(String, VideoMetrics)]) -> String {
    let width = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain([label_header.len()])
        .max()
        .unwrap_or(0);
    let mut out = format!("{label_header:<width$}");
    for c in COLUMNS {
        out.push_str(&format!(" {c:>8}"));
    }
    out.push('\n');
    for (label, m) in rows {
        out.push_str(&format!("{label:<width$}"));
        for v in m.values() {
            out.push_str(&format!(" {:>8}", format_cell(v)));
        }
        out.push('\n');
    }
    out
}
