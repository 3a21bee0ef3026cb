//! Brute-force reference implementations of the ranking metrics.

/// Position of `i` in the descending order, ties broken by index (0-based).
pub fn position(y: &[f64], i: usize) -> usize {
    (0..y.len()).filter(|&j| y[j] > y[i] || (y[j] == y[i] && j < i)).count()
}

pub fn top_set(y: &[f64], k: usize) -> Vec<bool> {
    (0..y.len()).map(|i| position(y, i) < k).collect()
}

pub fn f1(pred: &[f64], gt: &[f64]) -> f64 {
    let k = pred.len() / 2;
    let (p, g) = (top_set(pred, k), top_set(gt, k));
    let both = p.iter().zip(&g).filter(|(a, b)| **a && **b).count() as f64;
    let total = (p.iter().filter(|&&x| x).count() + g.iter().filter(|&&x| x).count()) as f64;
    if total == 0.0 {
        0.0
    } else {
        2.0 * both / total
    }
}

/// Mean over positives of the precision at each positive's position.
pub fn average_precision(pred: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut sum = 0.0;
    for i in (0..pred.len()).filter(|&i| positive[i]) {
        let r = position(pred, i);
        let above = (0..pred.len()).filter(|&j| positive[j] && position(pred, j) <= r).count();
        sum += above as f64 / (r + 1) as f64;
    }
    sum / n_pos as f64
}

/// 1-based midranks by counting smaller and equal values.
pub fn midranks(y: &[f64]) -> Vec<f64> {
    y.iter()
        .map(|&v| {
            let less = y.iter().filter(|&&w| w < v).count() as f64;
            let equal = y.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(pred: &[f64], gt: &[f64]) -> Option<f64> {
    let (a, b) = (midranks(pred), midranks(gt));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Tau-b from explicit pair classification.
pub fn kendall(pred: &[f64], gt: &[f64]) -> Option<f64> {
    let n = pred.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = pred[i] - pred[j];
            let dy = gt[i] - gt[j];
            if dx == 0.0 {
                tx += 1;
            }
            if dy == 0.0 {
                ty += 1;
            }
            if dx * dy > 0.0 {
                c += 1;
            } else if dx * dy < 0.0 {
                d += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let den = ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt();
    (den > 0.0).then(|| (c - d) as f64 / den)
}

/// Every permutation of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}
