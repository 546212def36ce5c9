//! Offline reranking by reversed retrieval: a candidate keeps a high score
//! only if the query also ranks highly when the candidate is used as a query.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorlab::Tensor;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 5] = b"EBKM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SarConfig {
    /// Rank-decay coefficient.
    pub tau: f64,
    /// Forward candidate depth.
    pub k: usize,
    /// Reverse candidate depth.
    pub l: usize,
    /// Weight of the reverse rank score.
    pub mu1: f64,
    /// Weight of the confirmation score.
    pub mu2: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Score pairs outside the forward top-k with their raw similarity
    /// instead of zero.
    pub raw_fallback: bool,
}

impl Default for SarConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            k: 10,
            l: 10,
            mu1: 0.5,
            mu2: 1.25,
            alpha: 0.6,
            beta: 0.4,
            raw_fallback: false,
        }
    }
}

impl SarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.k == 0 || self.l == 0 {
            return Err(Error::Config("SAR depths k and l must be at least 1".into()));
        }
        if !(self.mu1 >= 0.0) || !(self.mu2 >= 0.0) {
            return Err(Error::Config("mu1 and mu2 must be non-negative".into()));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("alpha and beta must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    I2t,
    T2i,
}

/// `e^{−τ(p+1)}` for a 0-based rank `p`.
pub fn rank_decay(position: usize, tau: f64) -> f64 {
    (-tau * (position as f64 + 1.0)).exp()
}

/// Share of the target's similarity among the reverse candidates.
pub fn confirmation(sims: &[f64], target: usize) -> Result<f64> {
    if target >= sims.len() {
        return Err(Error::Shape(format!("target {target} outside {} candidates", sims.len())));
    }
    let denom: f64 = sims.iter().sum();
    if denom == 0.0 {
        return Err(Error::Config("confirmation denominator is zero".into()));
    }
    Ok(sims[target] / denom)
}

/// Indices of `scores` in descending order; equal scores keep lower index first.
pub fn ranking(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    // Adding 0.0 folds -0.0 into 0.0 so signed zeros tie.
    let scores: Vec<f64> = scores.map(|v| v + 0.0).collect();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankedMatrix {
    pub direction: Direction,
    /// `s_fwd + μ₁·s_rev + μ₂·s_d` inside the forward top-k; zero (or the raw
    /// similarity with `raw_fallback`) outside it.
    pub scores: Tensor,
    pub s_fwd: Tensor,
    pub s_rev: Tensor,
    pub s_d: Tensor,
    /// Forward rank of each in-top-k pair; `None` elsewhere. Row-major.
    pub forward_rank: Vec<Option<usize>>,
    /// Reverse rank when the query is within the candidate's top-l.
    pub reverse_rank: Vec<Option<usize>>,
}

/// Reranks every row of a `Q × T` similarity matrix. Negative similarities
/// count as zero mass in the confirmation share, and an all-zero share
/// yields zero.
pub fn sar_rerank(sim: &Tensor, cfg: &SarConfig, direction: Direction) -> Result<RerankedMatrix> {
    cfg.validate()?;
    if sim.rank() != 2 {
        return Err(Error::Shape(format!("similarity must be a matrix, got {:?}", sim.shape())));
    }
    let (q, t) = sim.dims2();
    let mut k = cfg.k;
    let mut l = cfg.l;
    if k > t {
        log::warn!("SAR forward depth {k} exceeds {t} targets; clamped");
        k = t;
    }
    if l > q {
        log::warn!("SAR reverse depth {l} exceeds {q} queries; clamped");
        l = q;
    }
    let mut s_fwd = Tensor::zeros(&[q, t]);
    let mut s_rev = Tensor::zeros(&[q, t]);
    let mut s_d = Tensor::zeros(&[q, t]);
    let mut scores = if cfg.raw_fallback { sim.clone() } else { Tensor::zeros(&[q, t]) };
    let mut forward_rank = vec![None; q * t];
    let mut reverse_rank = vec![None; q * t];

    // Reverse top-l per target, computed once.
    let reverse: Vec<Vec<usize>> = (0..t)
        .map(|j| {
            let mut r = ranking((0..q).map(|i| sim.at(i, j)));
            r.truncate(l);
            r
        })
        .collect();

    for i in 0..q {
        let fwd = ranking(sim.row(i).iter().copied());
        for (p, &j) in fwd.iter().take(k).enumerate() {
            let at = i * t + j;
            let f = rank_decay(p, cfg.tau);
            let (mut r, mut d) = (0.0, 0.0);
            if let Some(pp) = reverse[j].iter().position(|&x| x == i) {
                r = rank_decay(pp, cfg.tau);
                let mass: Vec<f64> = reverse[j].iter().map(|&x| sim.at(x, j).max(0.0)).collect();
                if mass.iter().sum::<f64>() > 0.0 {
                    d = confirmation(&mass, pp)?;
                }
                reverse_rank[at] = Some(pp);
            }
            forward_rank[at] = Some(p);
            s_fwd.data_mut()[at] = f;
            s_rev.data_mut()[at] = r;
            s_d.data_mut()[at] = d;
            scores.data_mut()[at] = f + cfg.mu1 * r + cfg.mu2 * d;
        }
    }
    Ok(RerankedMatrix {
        direction,
        scores,
        s_fwd,
        s_rev,
        s_d,
        forward_rank,
        reverse_rank,
    })
}

/// `α·(global reranked) + β·(local reranked)`, with the per-pair scores
/// recombined under `μ₁`, `μ₂`.
pub fn fuse(
    global: &RerankedMatrix,
    local: &RerankedMatrix,
    alpha: f64,
    beta: f64,
    mu1: f64,
    mu2: f64,
) -> Result<Tensor> {
    if global.scores.shape() != local.scores.shape() {
        return Err(Error::Shape(format!(
            "cannot fuse {:?} with {:?}",
            global.scores.shape(),
            local.scores.shape()
        )));
    }
    if global.direction != local.direction {
        return Err(Error::Shape("cannot fuse reranks of different directions".into()));
    }
    let channel = |m: &RerankedMatrix, at: usize| match m.forward_rank[at] {
        Some(_) => m.s_fwd.data()[at] + mu1 * m.s_rev.data()[at] + mu2 * m.s_d.data()[at],
        None => m.scores.data()[at],
    };
    let n = global.scores.numel();
    let data = (0..n).map(|at| alpha * channel(global, at) + beta * channel(local, at)).collect();
    Ok(Tensor::new(global.scores.shape(), data)?)
}

/// Per-pair components of every in-top-k pair, for auditing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub query: usize,
    pub target: usize,
    pub forward_rank: usize,
    pub reverse_rank: Option<usize>,
    pub s_fwd: f64,
    pub s_rev: f64,
    pub s_d: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub direction: Direction,
    pub config: SarConfig,
    pub queries: usize,
    pub targets: usize,
    pub pairs: Vec<AuditEntry>,
}

impl RerankedMatrix {
    pub fn audit(&self, cfg: &SarConfig) -> Audit {
        let (q, t) = self.scores.dims2();
        let mut pairs = Vec::new();
        for i in 0..q {
            let mut row: Vec<AuditEntry> = (0..t)
                .filter_map(|j| {
                    let at = i * t + j;
                    self.forward_rank[at].map(|p| AuditEntry {
                        query: i,
                        target: j,
                        forward_rank: p,
                        reverse_rank: self.reverse_rank[at],
                        s_fwd: self.s_fwd.data()[at],
                        s_rev: self.s_rev.data()[at],
                        s_d: self.s_d.data()[at],
                        score: self.scores.data()[at],
                    })
                })
                .collect();
            row.sort_by_key(|e| e.forward_rank);
            pairs.extend(row);
        }
        Audit {
            direction: self.direction,
            config: cfg.clone(),
            queries: q,
            targets: t,
            pairs,
        }
    }
}

/// `EBKM1`: magic, rows and columns as little-endian `u64`, then row-major
/// little-endian `f64` values.
pub fn encode_matrix(m: &Tensor) -> Result<Vec<u8>> {
    if m.rank() != 2 {
        return Err(Error::Shape(format!("matrix file needs rank 2, got {:?}", m.shape())));
    }
    let (r, c) = m.dims2();
    let mut buf = Vec::with_capacity(21 + 8 * m.numel());
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&(r as u64).to_le_bytes());
    buf.extend_from_slice(&(c as u64).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_matrix(mut r: impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Format("matrix file: bad magic".into()));
    }
    let mut w = [0u8; 8];
    r.read_exact(&mut w)?;
    let rows = u64::from_le_bytes(w);
    r.read_exact(&mut w)?;
    let cols = u64::from_le_bytes(w);
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| Error::Format(format!("matrix file: implausible shape {rows}x{cols}")))?;
    let mut data = Vec::with_capacity(n as usize);
    for _ in 0..n {
        r.read_exact(&mut w)?;
        data.push(f64::from_le_bytes(w));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("matrix file: {} trailing bytes", rest.len())));
    }
    Ok(Tensor::new(&[rows as usize, cols as usize], data)?)
}

pub fn save_matrix(path: &Path, m: &Tensor) -> Result<()> {
    fs::write(path, encode_matrix(m)?)?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Tensor> {
    decode_matrix(fs::read(path)?.as_slice())
}
