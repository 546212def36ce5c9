//! Naive reference implementations and random instance generators shared by
//! the integration tests. Everything here is written from the definitions,
//! without reusing library code paths.
#![allow(dead_code)]

pub mod checks;

use std::collections::HashSet;

use ebaker::objective::{info_nce, info_nce_eliminated, inverse_temperature};
use ebaker::rerank::SarConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorlab::{Graph, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn tensor(m: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

fn nll(logits: &[f64], target: usize) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    -(logits[target].exp() / z).ln()
}

/// Sum over kept rows of both directions, divided by the full batch.
pub fn naive_info_nce(sim: &[Vec<f64>], temp: f64, keep: &[bool]) -> f64 {
    let b = sim.len();
    let mut total = 0.0;
    for i in (0..b).filter(|&i| keep[i]) {
        let row: Vec<f64> = (0..b).map(|j| sim[i][j] / temp).collect();
        let col: Vec<f64> = (0..b).map(|j| sim[j][i] / temp).collect();
        total += nll(&row, i) + nll(&col, i);
    }
    total / b as f64
}

pub fn lib_info_nce(sim: &[Vec<f64>], temp: f64, keep: Option<&[bool]>) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(tensor(sim));
    let it = inverse_temperature(&mut g, temp).unwrap();
    let v = match keep {
        None => info_nce(&mut g, s, it).unwrap(),
        Some(k) => info_nce_eliminated(&mut g, s, k, it).unwrap().0,
    };
    g.value(v).item()
}

pub fn naive_local(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut acc = 0.0;
    for x in a {
        for y in b {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let c = dot / (norm(x) * norm(y));
            acc += c * c;
        }
    }
    acc.sqrt()
}

/// Sorts every target of the row and scans the first `k`.
pub fn naive_recall(sim: &[Vec<f64>], truth: &[HashSet<usize>], k: usize) -> f64 {
    let mut hits = 0;
    for (q, row) in sim.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if order.iter().take(k).any(|(_, j)| truth[q].contains(j)) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / sim.len() as f64
}

fn naive_rank_of(scores: &[f64], idx: usize) -> usize {
    (0..scores.len())
        .filter(|&j| scores[j] > scores[idx] || (scores[j] == scores[idx] && j < idx))
        .count()
}

/// Recomputes every forward and reverse ranking from scratch per pair.
pub fn naive_sar(sim: &[Vec<f64>], cfg: &SarConfig) -> Vec<Vec<f64>> {
    let q = sim.len();
    let t = sim[0].len();
    let k = cfg.k.min(t);
    let l = cfg.l.min(q);
    let mut out = vec![vec![0.0; t]; q];
    for i in 0..q {
        for j in 0..t {
            let p = naive_rank_of(&sim[i], j);
            if p >= k {
                out[i][j] = if cfg.raw_fallback { sim[i][j] } else { 0.0 };
                continue;
            }
            let fwd = (-cfg.tau * (p as f64 + 1.0)).exp();
            let column: Vec<f64> = (0..q).map(|x| sim[x][j]).collect();
            let pp = naive_rank_of(&column, i);
            let (mut rev, mut conf) = (0.0, 0.0);
            if pp < l {
                rev = (-cfg.tau * (pp as f64 + 1.0)).exp();
                let top: Vec<usize> = (0..q).filter(|&x| naive_rank_of(&column, x) < l).collect();
                let denom: f64 = top.iter().map(|&x| column[x].max(0.0)).sum();
                if denom > 0.0 {
                    conf = column[i].max(0.0) / denom;
                }
            }
            out[i][j] = fwd + cfg.mu1 * rev + cfg.mu2 * conf;
        }
    }
    out
}

pub fn random_sar_config(r: &mut ChaCha8Rng) -> SarConfig {
    SarConfig {
        tau: r.random_range(0.01..0.5),
        k: r.random_range(1..=6),
        l: r.random_range(1..=6),
        mu1: r.random_range(0.0..1.0),
        mu2: r.random_range(0.0..2.0),
        raw_fallback: r.random_bool(0.2),
        ..Default::default()
    }
}

/// Truth sets with 1..=3 correct targets per query.
pub fn random_truth(r: &mut ChaCha8Rng, q: usize, t: usize) -> Vec<HashSet<usize>> {
    (0..q)
        .map(|_| {
            let n = r.random_range(1..=3.min(t));
            let mut s = HashSet::new();
            while s.len() < n {
                s.insert(r.random_range(0..t));
            }
            s
        })
        .collect()
}

/// Quantizes to a coarse grid so ties occur often.
pub fn with_ties(m: &mut [Vec<f64>]) {
    for row in m {
        for v in row {
            *v = (*v * 4.0).round() / 4.0;
        }
    }
}
