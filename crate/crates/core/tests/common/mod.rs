//! Naive-loop reference implementations, written independently of the
//! tape-based library code, plus small random generators.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `O[j][p]` for features `f[d][p]` (p = h·W + w), concepts `c[j][d]`.
pub fn occurrence(f: &[f64], d: usize, area: usize, c: &[f64], alpha: &[f64]) -> Vec<f64> {
    let k = alpha.len();
    let mut out = vec![0.0; k * area];
    for p in 0..area {
        let mut logits = vec![0.0; k];
        for j in 0..k {
            let mut sq = 0.0;
            for i in 0..d {
                let r = (f[i * area + p] - c[j * d + i]) / alpha[j];
                sq += r * r;
            }
            logits[j] = -sq / 2.0;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..k {
            out[j * area + p] = (logits[j] - m).exp() / z;
        }
    }
    out
}

/// Argmax per position, first index on ties.
pub fn hard_partition(o: &[f64], k: usize, area: usize) -> Vec<usize> {
    (0..area)
        .map(|p| {
            let mut best = 0;
            for j in 0..k {
                if o[j * area + p] > o[best * area + p] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Zero-padded 2-D correlation of each channel with `kernel`, then the max.
pub fn presence(o: &[f64], k: usize, h: usize, w: usize, kernel: &[f64], ks: usize) -> Vec<f64> {
    let half = (ks / 2) as isize;
    (0..k)
        .map(|j| {
            let mut best = f64::NEG_INFINITY;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0;
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let kv = kernel[((dy + half) as usize) * ks + (dx + half) as usize];
                            acc += kv * o[j * h * w + yy as usize * w + xx as usize];
                        }
                    }
                    best = best.max(acc);
                }
            }
            best
        })
        .collect()
}

/// Normalized probability-weighted mean residual per concept, `[K][D]`.
pub fn pool(f: &[f64], d: usize, area: usize, c: &[f64], alpha: &[f64], o: &[f64]) -> Vec<f64> {
    let k = alpha.len();
    let mut out = vec![0.0; k * d];
    for j in 0..k {
        let mut mass = 0.0;
        for p in 0..area {
            mass += o[j * area + p];
        }
        let mut t = vec![0.0; d];
        for i in 0..d {
            for p in 0..area {
                t[i] += o[j * area + p] * (f[i * area + p] - c[j * d + i]) / alpha[j];
            }
            t[i] /= mass;
        }
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-8 {
            for i in 0..d {
                out[j * d + i] = t[i] / norm;
            }
        }
    }
    out
}

/// Mean over all entries of `|ln(p + 1e-5)|`.
pub fn presence_loss(p: &[f64]) -> f64 {
    p.iter().map(|v| (v + 1e-5).ln().abs()).sum::<f64>() / p.len() as f64
}

/// Mean cross-entropy of logits rows against labels.
pub fn cross_entropy(logits: &[f64], c: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// `Σ_j w_j · probs[j][c]` per class.
pub fn aggregate(w: &[f64], probs: &[Vec<f64>]) -> Vec<f64> {
    let c = probs[0].len();
    let mut out = vec![0.0; c];
    for cls in 0..c {
        for j in 0..w.len() {
            out[cls] += w[j] * probs[j][cls];
        }
    }
    out
}

/// `−(1/N) Σ_i Σ_j ln max(f_ij[y_i], 1e-12)`.
pub fn expert_loss(probs: &[Vec<Vec<f64>>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for e in &probs[i] {
            total -= e[y].max(1e-12).ln();
        }
    }
    total / labels.len() as f64
}

/// `−(1/N) Σ ln agg_i[y_i] + γ/(K·N) Σ (w_ij − 1/K)²`.
pub fn gate_loss(agg: &[Vec<f64>], w: &[Vec<f64>], labels: &[usize], gamma: f64) -> f64 {
    let n = labels.len() as f64;
    let k = w[0].len();
    let mut ce = 0.0;
    let mut pen = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        ce -= agg[i][y].max(1e-12).ln();
        for wij in &w[i] {
            pen += (wij - 1.0 / k as f64).powi(2);
        }
    }
    ce / n + gamma * pen / (k as f64 * n)
}

/// Random probability vector of length `n`.
pub fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}
