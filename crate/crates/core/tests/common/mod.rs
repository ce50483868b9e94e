//! Brute-force reference implementations shared by the integration tests.
//! Everything here is written with plain loops over `f64` slices and never
//! calls into the library's numeric paths.

#![allow(dead_code)]

use std::collections::BTreeMap;

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `softmax((Q ⊙ G) Kᵀ) V` over the listed nodes only, one query at a time.
pub fn attention(x: &Mat, g: Option<&Mat>, wq: &Mat, wk: &Mat, wv: &Mat, nodes: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let q = matmul(x, wq);
    let k = matmul(x, wk);
    let v = matmul(x, wv);
    let c = v[0].len();
    let mut out = BTreeMap::new();
    for &i in nodes {
        let logits: Vec<f64> = nodes
            .iter()
            .map(|&j| {
                (0..q[i].len())
                    .map(|d| q[i][d] * g.map_or(1.0, |g| g[i][d]) * k[j][d])
                    .sum()
            })
            .collect();
        let w = softmax(&logits);
        let mut o = vec![0.0; c];
        for (wj, &j) in w.iter().zip(nodes) {
            for d in 0..c {
                o[d] += wj * v[j][d];
            }
        }
        out.insert(i, o);
    }
    out
}

/// Window membership by scanning every window's half-open box.
pub fn window_partition(coords: &[[f64; 2]], valid: &[bool], extent: (usize, usize), dh: usize, dw: usize) -> BTreeMap<(usize, usize), Vec<usize>> {
    let rows = extent.0.div_ceil(dh);
    let cols = extent.1.div_ceil(dw);
    let mut out = BTreeMap::new();
    for u in 0..rows {
        for v in 0..cols {
            let members: Vec<usize> = (0..coords.len())
                .filter(|&i| valid[i])
                .filter(|&i| {
                    let [r, c] = coords[i];
                    r >= (u * dh) as f64 && r < ((u + 1) * dh) as f64 && c >= (v * dw) as f64 && c < ((v + 1) * dw) as f64
                })
                .collect();
            if !members.is_empty() {
                out.insert((u, v), members);
            }
        }
    }
    out
}

/// Row-wise: keep self plus the `k − 1` largest off-diagonal scores (ties to
/// the lower index), softmax over the kept entries, zeros elsewhere.
pub fn knn_softmax(s: &Mat, k: usize) -> Mat {
    let n = s.len();
    (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            // insertion sort: descending score, ascending index
            for a in 1..others.len() {
                let mut b = a;
                while b > 0 {
                    let (x, y) = (others[b - 1], others[b]);
                    let swap = s[i][y] > s[i][x] || (s[i][y] == s[i][x] && y < x);
                    if !swap {
                        break;
                    }
                    others.swap(b - 1, b);
                    b -= 1;
                }
            }
            let mut kept = vec![i];
            kept.extend_from_slice(&others[..k - 1]);
            let w = softmax(&kept.iter().map(|&j| s[i][j]).collect::<Vec<_>>());
            let mut row = vec![0.0; n];
            for (wj, &j) in w.iter().zip(&kept) {
                row[j] = *wj;
            }
            row
        })
        .collect()
}

/// Column-wise `((1/n) Σ x^p)^{1/p}` for positive inputs.
pub fn gem(x: &Mat, p: f64) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x[0].len())
        .map(|j| (x.iter().map(|r| r[j].powf(p)).sum::<f64>() / n).powf(1.0 / p))
        .collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn triplet(a: &[f64], p: &[f64], n: &[f64], m: f64) -> f64 {
    (dist(a, p) - dist(a, n) + m).max(0.0)
}

pub struct RecallOracle {
    /// Hit counts at N = 1..=k_max.
    pub hits: Vec<usize>,
    pub hits_one_percent: usize,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Full sort of the database per query by (descriptor distance, id).
pub fn recall(
    db: &[(u64, Vec<f64>, [f64; 3])],
    queries: &[(Vec<f64>, [f64; 3])],
    k_max: usize,
    tau: f64,
) -> RecallOracle {
    let one_pct = db.len().div_ceil(100).max(1);
    let mut out = RecallOracle {
        hits: vec![0; k_max],
        hits_one_percent: 0,
        evaluated: 0,
        excluded: 0,
    };
    for (qf, qp) in queries {
        let positive = |p: &[f64; 3]| dist(p, qp) <= tau;
        if !db.iter().any(|(_, _, p)| positive(p)) {
            out.excluded += 1;
            continue;
        }
        out.evaluated += 1;
        let mut order: Vec<(f64, u64, bool)> = db.iter().map(|(id, f, p)| (dist(f, qf), *id, positive(p))).collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for n in 1..=k_max {
            if order.iter().take(n).any(|e| e.2) {
                out.hits[n - 1] += 1;
            }
        }
        if order.iter().take(one_pct).any(|e| e.2) {
            out.hits_one_percent += 1;
        }
    }
    out
}

/// Classic scalar RK4 on `[0, 1]`.
pub fn rk4_scalar(f: impl Fn(f64) -> f64, y0: f64, steps: usize) -> f64 {
    let h = 1.0 / steps as f64;
    let mut y = y0;
    for _ in 0..steps {
        let k1 = f(y);
        let k2 = f(y + 0.5 * h * k1);
        let k3 = f(y + 0.5 * h * k2);
        let k4 = f(y + h * k3);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    y
}

pub fn random_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(lo..hi)).collect()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
