//! Oracle comparisons over seeded random instances. Each returns the number
//! of instances checked or a description of the first mismatch.

use ebaker::alignment::local_similarity;
use ebaker::eval::recall_at_k;
use ebaker::rerank::{sar_rerank, Direction};
use rand::Rng;

use super::*;

pub fn info_nce_plain(instances: u64) -> Result<u64, String> {
    for seed in 0..instances {
        let mut r = rng(seed);
        let b = r.random_range(2..=8);
        let sim = matrix(&mut r, b, b);
        let temp = r.random_range(0.05..2.0);
        let want = naive_info_nce(&sim, temp, &vec![true; b]);
        let got = lib_info_nce(&sim, temp, None);
        if (got - want).abs() > 1e-9 * want.abs().max(1.0) {
            return Err(format!("info_nce seed {seed}: {got} vs {want}"));
        }
    }
    Ok(instances)
}

pub fn info_nce_eliminated(instances: u64) -> Result<u64, String> {
    for seed in 0..instances {
        let mut r = rng(1000 + seed);
        let b = r.random_range(2..=8);
        let sim = matrix(&mut r, b, b);
        let temp = r.random_range(0.05..2.0);
        let mut keep: Vec<bool> = (0..b).map(|_| r.random_bool(0.7)).collect();
        keep[r.random_range(0..b)] = true;
        let want = naive_info_nce(&sim, temp, &keep);
        let got = lib_info_nce(&sim, temp, Some(&keep));
        if (got - want).abs() > 1e-9 * want.abs().max(1.0) {
            return Err(format!("info_nce_eliminated seed {seed}: {got} vs {want}"));
        }
    }
    Ok(instances)
}

pub fn local(instances: u64) -> Result<u64, String> {
    for seed in 0..instances {
        let mut r = rng(2000 + seed);
        let (n, w, d) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=6));
        let a = matrix(&mut r, n, d);
        let b = matrix(&mut r, w, d);
        let got = local_similarity(&tensor(&a), &tensor(&b)).map_err(|e| e.to_string())?;
        let want = naive_local(&a, &b);
        if (got - want).abs() > 1e-9 {
            return Err(format!("local_similarity seed {seed}: {got} vs {want}"));
        }
        if got > ((n * w) as f64).sqrt() + 1e-12 {
            return Err(format!("local_similarity seed {seed}: {got} above sqrt(N·W)"));
        }
    }
    Ok(instances)
}

/// Exact equality, including tied similarities on every other instance.
pub fn recall(instances: u64) -> Result<u64, String> {
    for seed in 0..instances {
        let mut r = rng(3000 + seed);
        let (q, t) = (r.random_range(1..=8), r.random_range(1..=8));
        let mut sim = matrix(&mut r, q, t);
        if seed % 2 == 0 {
            with_ties(&mut sim);
        }
        let truth = random_truth(&mut r, q, t);
        for k in 1..=t + 1 {
            let got = recall_at_k(&tensor(&sim), &truth, k).map_err(|e| e.to_string())?;
            let want = naive_recall(&sim, &truth, k);
            if got != want {
                return Err(format!("recall seed {seed} k {k}: {got} vs {want}"));
            }
        }
    }
    Ok(instances)
}

pub fn sar(instances: u64) -> Result<u64, String> {
    for seed in 0..instances {
        let mut r = rng(4000 + seed);
        let (q, t) = (r.random_range(1..=6), r.random_range(1..=6));
        let mut sim = matrix(&mut r, q, t);
        if seed % 3 == 0 {
            with_ties(&mut sim);
        }
        let cfg = random_sar_config(&mut r);
        let got = sar_rerank(&tensor(&sim), &cfg, Direction::I2t).map_err(|e| e.to_string())?;
        let want = naive_sar(&sim, &cfg);
        for i in 0..q {
            for j in 0..t {
                let (a, b) = (got.scores.at(i, j), want[i][j]);
                if (a - b).abs() > 1e-9 {
                    return Err(format!("sar seed {seed} ({i},{j}): {a} vs {b}"));
                }
            }
        }
    }
    Ok(instances)
}
