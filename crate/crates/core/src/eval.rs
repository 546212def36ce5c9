//! Recall@k, mean recall and the retrieval evaluation harness.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tensorlab::Tensor;

use crate::alignment::{combine_matrices, similarity_matrices};
use crate::corpus::{tokenize, Sample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rerank::{fuse, ranking, sar_rerank, Direction, SarConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];
const ENCODE_CHUNK: usize = 64;

/// Percentage of queries with a correct target among their top `k` (ties
/// broken by lower target index).
pub fn recall_at_k(sim: &Tensor, truth: &[HashSet<usize>], k: usize) -> Result<f64> {
    if sim.rank() != 2 || sim.rows() != truth.len() {
        return Err(Error::Shape(format!(
            "{} truth sets for similarity {:?}",
            truth.len(),
            sim.shape()
        )));
    }
    if truth.is_empty() {
        return Err(Error::EmptyTruth(0));
    }
    let mut hits = 0usize;
    for (q, want) in truth.iter().enumerate() {
        if want.is_empty() {
            return Err(Error::EmptyTruth(q));
        }
        // Rank of the best correct target = number of targets ordered before it.
        let row = sim.row(q);
        let best = want
            .iter()
            .map(|&t| {
                row.iter()
                    .enumerate()
                    .filter(|&(j, &v)| v > row[t] || (v == row[t] && j < t))
                    .count()
            })
            .min()
            .unwrap_or(usize::MAX);
        if best < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    pub fn compute(sim: &Tensor, truth: &[HashSet<usize>]) -> Result<Self> {
        Ok(Self {
            r1: recall_at_k(sim, truth, 1)?,
            r5: recall_at_k(sim, truth, 5)?,
            r10: recall_at_k(sim, truth, 10)?,
        })
    }

    fn values(&self) -> [f64; 3] {
        [self.r1, self.r5, self.r10]
    }
}

/// Recalls in both directions. Image→text counts a hit when any of the
/// image's captions is retrieved; text→image truth is the source image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub caption_retrieval: Recalls,
    pub image_retrieval: Recalls,
    #[serde(rename = "mR")]
    pub m_r: f64,
}

impl Metrics {
    pub fn new(caption_retrieval: Recalls, image_retrieval: Recalls) -> Self {
        let sum: f64 = caption_retrieval
            .values()
            .iter()
            .chain(&image_retrieval.values())
            .sum();
        Self {
            caption_retrieval,
            image_retrieval,
            m_r: sum / 6.0,
        }
    }

    pub fn six(&self) -> [f64; 6] {
        let [a, b, c] = self.caption_retrieval.values();
        let [d, e, f] = self.image_retrieval.values();
        [a, b, c, d, e, f]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub alpha: f64,
    pub beta: f64,
    pub sar: Option<SarConfig>,
}

/// Image-by-caption similarity of one split and the owner of each caption.
#[derive(Clone, Debug)]
pub struct SplitSimilarity {
    pub global: Tensor,
    pub local: Tensor,
    pub caption_owner: Vec<usize>,
}

impl SplitSimilarity {
    pub fn i2t_truth(&self) -> Vec<HashSet<usize>> {
        let mut t = vec![HashSet::new(); self.global.rows()];
        for (j, &o) in self.caption_owner.iter().enumerate() {
            t[o].insert(j);
        }
        t
    }

    pub fn t2i_truth(&self) -> Vec<HashSet<usize>> {
        self.caption_owner.iter().map(|&o| HashSet::from([o])).collect()
    }

    /// Fused matrices `(i2t, t2i)`: the weighted sum of both channels, or
    /// the per-channel reranks fused when SAR is on.
    pub fn fused(&self, opts: &EvalOptions) -> Result<(Tensor, Tensor)> {
        match &opts.sar {
            None => {
                let s = combine_matrices(&self.global, &self.local, opts.alpha, opts.beta)?;
                let t = s.transpose();
                Ok((s, t))
            }
            Some(cfg) => {
                let run = |g: &Tensor, l: &Tensor, d: Direction| -> Result<Tensor> {
                    let rg = sar_rerank(g, cfg, d)?;
                    let rl = sar_rerank(l, cfg, d)?;
                    fuse(&rg, &rl, opts.alpha, opts.beta, cfg.mu1, cfg.mu2)
                };
                let i2t = run(&self.global, &self.local, Direction::I2t)?;
                let t2i = run(&self.global.transpose(), &self.local.transpose(), Direction::T2i)?;
                Ok((i2t, t2i))
            }
        }
    }

    pub fn metrics(&self, opts: &EvalOptions) -> Result<Metrics> {
        let (i2t, t2i) = self.fused(opts)?;
        Ok(Metrics::new(
            Recalls::compute(&i2t, &self.i2t_truth())?,
            Recalls::compute(&t2i, &self.t2i_truth())?,
        ))
    }
}

/// Encodes every image and caption of `samples` once.
pub fn split_similarity(model: &Model, vocab: &Vocabulary, samples: &[Sample]) -> Result<SplitSimilarity> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus(0));
    }
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.features).collect();
    let mut tokens = Vec::new();
    let mut caption_owner = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for c in &s.captions {
            tokens.push(tokenize(c, vocab, model.cfg.max_len)?);
            caption_owner.push(i);
        }
    }
    let seqs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
    let ip = model.encode_image_packs(&images, ENCODE_CHUNK)?;
    let tp = model.encode_text_packs(&seqs, ENCODE_CHUNK)?;
    let (global, local) = similarity_matrices(&ip, &tp)?;
    Ok(SplitSimilarity {
        global,
        local,
        caption_owner,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Display {
    pub caption_retrieval: [String; 3],
    pub image_retrieval: [String; 3],
    #[serde(rename = "mR")]
    pub m_r: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub schema_version: u32,
    pub split: String,
    pub caption_retrieval: Recalls,
    pub image_retrieval: Recalls,
    #[serde(rename = "mR")]
    pub m_r: f64,
    /// Recalls rounded to one decimal place.
    pub display: Display,
    pub alpha: f64,
    pub beta: f64,
    pub sar: Option<SarConfig>,
    pub num_images: usize,
    pub num_captions: usize,
    pub config_hash: String,
    pub checkpoint: String,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl RetrievalReport {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            caption_retrieval: self.caption_retrieval,
            image_retrieval: self.image_retrieval,
            m_r: self.m_r,
        }
    }
}

/// Provenance fields copied into a report.
#[derive(Clone, Debug, Default)]
pub struct ReportMeta {
    pub split: String,
    pub config_hash: String,
    pub checkpoint: String,
    pub seed: u64,
}

pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    samples: &[Sample],
    opts: &EvalOptions,
    meta: &ReportMeta,
) -> Result<RetrievalReport> {
    let start = Instant::now();
    if let Some(s) = &opts.sar {
        s.validate()?;
    }
    let sims = split_similarity(model, vocab, samples)?;
    let m = sims.metrics(opts)?;
    let d1 = |r: &Recalls| r.values().map(|v| format!("{v:.1}"));
    Ok(RetrievalReport {
        schema_version: SCHEMA_VERSION,
        split: meta.split.clone(),
        caption_retrieval: m.caption_retrieval,
        image_retrieval: m.image_retrieval,
        m_r: m.m_r,
        display: Display {
            caption_retrieval: d1(&m.caption_retrieval),
            image_retrieval: d1(&m.image_retrieval),
            m_r: format!("{:.1}", m.m_r),
        },
        alpha: opts.alpha,
        beta: opts.beta,
        sar: opts.sar.clone(),
        num_images: samples.len(),
        num_captions: sims.caption_owner.len(),
        config_hash: meta.config_hash.clone(),
        checkpoint: meta.checkpoint.clone(),
        seed: meta.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Top-`k` target indices of one row, ties by lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut r = ranking(row.iter().copied());
    r.truncate(k);
    r
}
