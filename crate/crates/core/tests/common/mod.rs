//! Straightforward reference implementations of the ball operations and
//! metrics, written independently of the library kernels.

#![allow(dead_code)]

use std::path::PathBuf;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn mobius_add(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let xy = dot(x, y);
    let x2 = dot(x, x);
    let y2 = dot(y, y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / den).collect()
}

fn neg(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| -v).collect()
}

pub fn dist(x: &[f64], y: &[f64], c: f64) -> f64 {
    let m = mobius_add(&neg(x), y, c);
    2.0 / c.sqrt() * (c.sqrt() * norm(&m)).atanh()
}

pub fn lambda(x: &[f64], c: f64) -> f64 {
    2.0 / (1.0 - c * dot(x, x))
}

pub fn exp_map(x: &[f64], v: &[f64], c: f64) -> Vec<f64> {
    let vn = norm(v);
    if vn == 0.0 {
        return x.to_vec();
    }
    let sc = c.sqrt();
    let t = (sc * lambda(x, c) * vn / 2.0).tanh() / (sc * vn);
    let w: Vec<f64> = v.iter().map(|vi| t * vi).collect();
    mobius_add(x, &w, c)
}

pub fn log_map(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let m = mobius_add(&neg(x), y, c);
    let mn = norm(&m);
    if mn == 0.0 {
        return vec![0.0; x.len()];
    }
    let sc = c.sqrt();
    let s = 2.0 / (sc * lambda(x, c)) * (sc * mn).atanh() / mn;
    m.iter().map(|mi| s * mi).collect()
}

/// One-vs-rest AUC of one score column by counting every
/// (positive, negative) pair; ties count one half.
pub fn pair_count_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Brute-force mean normalised k-NN label entropy under `dist`.
pub fn brute_entropy(points: &[Vec<f64>], labels: &[usize], k: usize, c: f64) -> f64 {
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return 0.0;
    }
    let norm = (distinct.len() as f64).ln();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, q)| (dist(p, q, c), j))
            .collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut h = 0.0;
        for &l in &distinct {
            let n = d[..k].iter().filter(|(_, j)| labels[*j] == l).count();
            if n > 0 {
                let q = n as f64 / k as f64;
                h -= q * q.ln();
            }
        }
        total += h / norm;
    }
    total / points.len() as f64
}
