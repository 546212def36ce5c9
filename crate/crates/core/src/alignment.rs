//! Global and local similarity, per-epoch similarity banks, elimination
//! thresholds and the per-batch keep masks derived from them.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorlab::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{BatchFeatures, FeaturePack};

pub const BANK_MAGIC: &[u8; 5] = b"EBKB1";

/// Cosine similarity of every vision row against every text row.
pub fn global_similarity(fv: &Tensor, ft: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(fv.clone());
    let b = g.constant(ft.clone());
    let c = g.cosine_rows(a, b)?;
    Ok(g.value(c).clone())
}

fn unit_rows(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    let (m, d) = t.dims2();
    let mut out = t.data().to_vec();
    for r in 0..m {
        let row = &mut out[r * d..(r + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Shape(format!("{what} row {r} has zero or non-finite norm")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

fn frobenius_of_cosines(a: &[f64], b: &[f64], d: usize) -> f64 {
    let mut acc = 0.0;
    for ra in a.chunks(d) {
        for rb in b.chunks(d) {
            let c: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            acc += c * c;
        }
    }
    acc.sqrt()
}

/// Frobenius norm of the `N × W` matrix of local cosines.
pub fn local_similarity(fv_loc: &Tensor, ft_loc: &Tensor) -> Result<f64> {
    let (n, d) = fv_loc.dims2();
    let (w, dt) = ft_loc.dims2();
    if n == 0 || w == 0 {
        return Err(Error::Shape("local similarity needs at least one row on each side".into()));
    }
    if d != dt {
        return Err(Error::Shape(format!("local features of width {d} and {dt}")));
    }
    let a = unit_rows(fv_loc, "vision local")?;
    let b = unit_rows(ft_loc, "text local")?;
    Ok(frobenius_of_cosines(&a, &b, d))
}

/// Pairwise global and local similarity between every image and every text,
/// rows indexed by image.
pub fn similarity_matrices(images: &[FeaturePack], texts: &[FeaturePack]) -> Result<(Tensor, Tensor)> {
    let to_matrix = |packs: &[FeaturePack]| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = packs.iter().map(|p| p.global.clone()).collect();
        Ok(Tensor::from_rows(&rows)?)
    };
    let global = global_similarity(&to_matrix(images)?, &to_matrix(texts)?)?;
    let d = images.first().map_or(0, |p| p.locals.cols());
    let iv: Vec<Vec<f64>> = images
        .iter()
        .map(|p| unit_rows(&p.locals, "vision local"))
        .collect::<Result<_>>()?;
    let tv: Vec<Vec<f64>> = texts
        .iter()
        .map(|p| unit_rows(&p.locals, "text local"))
        .collect::<Result<_>>()?;
    let mut local = Vec::with_capacity(images.len() * texts.len());
    for a in &iv {
        for (j, b) in tv.iter().enumerate() {
            if a.is_empty() || b.is_empty() {
                return Err(Error::Shape(format!("text {j} or an image has no local rows")));
            }
            local.push(frobenius_of_cosines(a, b, d));
        }
    }
    Ok((global, Tensor::new(&[images.len(), texts.len()], local)?))
}

/// Differentiable `B × B` global and local similarity matrices of a batch,
/// rows indexed by image and columns by text.
pub fn batch_similarity(g: &mut Graph, vision: &BatchFeatures, text: &BatchFeatures) -> Result<(Var, Var)> {
    let global = g.cosine_rows(vision.global, text.global)?;
    let cos = g.cosine_rows(vision.locals, text.locals)?;
    let local = g.block_frobenius(cos, &vision.local_lens, &text.local_lens)?;
    Ok((global, local))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub global: f64,
    pub local: f64,
}

pub fn combine(sim: SimilarityPair, alpha: f64, beta: f64) -> f64 {
    alpha * sim.global + beta * sim.local
}

/// Elementwise `alpha·global + beta·local` of two equally shaped matrices.
pub fn combine_matrices(global: &Tensor, local: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    if global.shape() != local.shape() {
        return Err(Error::Shape(format!(
            "cannot combine {:?} with {:?}",
            global.shape(),
            local.shape()
        )));
    }
    let data = global
        .data()
        .iter()
        .zip(local.data())
        .map(|(g, l)| alpha * g + beta * l)
        .collect();
    Ok(Tensor::new(global.shape(), data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Global,
    Local,
    Joint,
}

impl BankKind {
    fn byte(self) -> u8 {
        match self {
            BankKind::Global => 0,
            BankKind::Local => 1,
            BankKind::Joint => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(BankKind::Global),
            1 => Ok(BankKind::Local),
            2 => Ok(BankKind::Joint),
            _ => Err(Error::Format(format!("bank kind byte {b}"))),
        }
    }
}

/// One score per training pair for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityBank {
    pub epoch: usize,
    pub kind: BankKind,
    scores: Vec<Option<f64>>,
    filled: usize,
}

impl SimilarityBank {
    pub fn new(epoch: usize, kind: BankKind, len: usize) -> Self {
        Self {
            epoch,
            kind,
            scores: vec![None; len],
            filled: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_complete(&self) -> bool {
        self.filled == self.scores.len()
    }

    pub fn record(&mut self, pair: usize, score: f64) -> Result<()> {
        let len = self.scores.len();
        let slot = self
            .scores
            .get_mut(pair)
            .ok_or(Error::PairOutOfRange { pair, len })?;
        if slot.is_some() {
            return Err(Error::DuplicateWrite {
                pair,
                epoch: self.epoch,
            });
        }
        if !score.is_finite() {
            return Err(Error::Tensor(tensorlab::TensorError::NonFinite(format!(
                "bank score for pair {pair}"
            ))));
        }
        *slot = Some(score);
        self.filled += 1;
        Ok(())
    }

    pub fn get(&self, pair: usize) -> Option<f64> {
        self.scores.get(pair).copied().flatten()
    }

    /// All scores in pair order; fails unless every pair was recorded.
    pub fn scores(&self) -> Result<Vec<f64>> {
        if !self.is_complete() {
            return Err(Error::IncompleteBank {
                epoch: self.epoch,
                filled: self.filled,
                len: self.scores.len(),
            });
        }
        Ok(self.scores.iter().map(|s| s.unwrap_or(f64::NAN)).collect())
    }

    pub fn from_scores(epoch: usize, kind: BankKind, scores: &[f64]) -> Self {
        Self {
            epoch,
            kind,
            scores: scores.iter().map(|&s| Some(s)).collect(),
            filled: scores.len(),
        }
    }

    pub fn derive_threshold(&self, drop_ratio: f64) -> Result<f64> {
        threshold_from_scores(&self.scores()?, drop_ratio)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let scores = self.scores()?;
        let mut buf = Vec::with_capacity(22 + 8 * scores.len());
        buf.extend_from_slice(BANK_MAGIC);
        buf.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        buf.extend_from_slice(&(scores.len() as u64).to_le_bytes());
        buf.push(self.kind.byte());
        for s in scores {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format("bank file: bad magic".into()));
        }
        let mut w = [0u8; 8];
        r.read_exact(&mut w)?;
        let epoch = u64::from_le_bytes(w) as usize;
        r.read_exact(&mut w)?;
        let len = u64::from_le_bytes(w);
        if len > 1 << 32 {
            return Err(Error::Format(format!("bank file: implausible length {len}")));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind = BankKind::from_byte(kind[0])?;
        let mut scores = Vec::with_capacity(len as usize);
        for _ in 0..len {
            r.read_exact(&mut w)?;
            scores.push(f64::from_le_bytes(w));
        }
        Ok(Self::from_scores(epoch, kind, &scores))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(fs::read(path)?.as_slice())
    }
}

/// The `k`-th smallest score with `k = max(1, ⌊drop_ratio·L⌋)`, or `-∞`
/// when `drop_ratio` is zero. Scores at or below it are eliminated.
pub fn threshold_from_scores(scores: &[f64], drop_ratio: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&drop_ratio) {
        return Err(Error::Config(format!("drop ratio {drop_ratio} outside [0,1)")));
    }
    if drop_ratio == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if scores.is_empty() {
        return Err(Error::IncompleteBank {
            epoch: 0,
            filled: 0,
            len: 0,
        });
    }
    let l = scores.len();
    // The epsilon keeps products such as 0.29 × 100 from flooring to 28.
    let k = ((drop_ratio * l as f64 + 1e-9).floor() as usize).clamp(1, l);
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[l - k])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Joint,
    #[default]
    Split,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Joint => "joint",
            Scheme::Split => "split",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub scheme: Scheme,
    pub th_global: f64,
    pub th_local: f64,
    pub th_joint: f64,
    pub drop_ratio: f64,
    /// Epoch whose banks produced these thresholds.
    pub source_epoch: Option<usize>,
    /// Weights of the joint score.
    pub alpha: f64,
    pub beta: f64,
}

impl Thresholds {
    /// Keeps everything.
    pub fn inactive(scheme: Scheme, alpha: f64, beta: f64) -> Self {
        Self {
            scheme,
            th_global: f64::NEG_INFINITY,
            th_local: f64::NEG_INFINITY,
            th_joint: f64::NEG_INFINITY,
            drop_ratio: 0.0,
            source_epoch: None,
            alpha,
            beta,
        }
    }

    pub fn is_active(&self) -> bool {
        self.th_global > f64::NEG_INFINITY
            || self.th_local > f64::NEG_INFINITY
            || self.th_joint > f64::NEG_INFINITY
    }

    /// Split thresholds from separate global and local banks.
    pub fn split(global: &SimilarityBank, local: &SimilarityBank, drop_ratio: f64) -> Result<Self> {
        Ok(Self {
            scheme: Scheme::Split,
            th_global: global.derive_threshold(drop_ratio)?,
            th_local: local.derive_threshold(drop_ratio)?,
            th_joint: f64::NEG_INFINITY,
            drop_ratio,
            source_epoch: Some(global.epoch),
            alpha: 0.0,
            beta: 0.0,
        })
    }

    /// Joint threshold from a bank of combined scores.
    pub fn joint(joint: &SimilarityBank, drop_ratio: f64, alpha: f64, beta: f64) -> Result<Self> {
        Ok(Self {
            scheme: Scheme::Joint,
            th_global: f64::NEG_INFINITY,
            th_local: f64::NEG_INFINITY,
            th_joint: joint.derive_threshold(drop_ratio)?,
            drop_ratio,
            source_epoch: Some(joint.epoch),
            alpha,
            beta,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEliminationMask {
    pub keep_global: Vec<bool>,
    pub keep_local: Vec<bool>,
    pub r_global: usize,
    pub r_local: usize,
}

impl BatchEliminationMask {
    pub fn keep_all(b: usize) -> Self {
        Self {
            keep_global: vec![true; b],
            keep_local: vec![true; b],
            r_global: 0,
            r_local: 0,
        }
    }

    fn from_flags(keep_global: Vec<bool>, keep_local: Vec<bool>) -> Self {
        let r_global = keep_global.iter().filter(|k| !**k).count();
        let r_local = keep_local.iter().filter(|k| !**k).count();
        Self {
            keep_global,
            keep_local,
            r_global,
            r_local,
        }
    }
}

/// Keep flags for the matched pairs of one batch. A pair is kept only when
/// its score strictly exceeds the threshold.
pub fn eliminate(
    scores_g: &[f64],
    scores_l: &[f64],
    th: &Thresholds,
    scheme: Scheme,
) -> Result<BatchEliminationMask> {
    if th.scheme != scheme {
        return Err(Error::SchemeMismatch {
            have: th.scheme.as_str(),
            want: scheme.as_str(),
        });
    }
    if scores_g.len() != scores_l.len() {
        return Err(Error::Shape(format!(
            "{} global scores vs {} local scores",
            scores_g.len(),
            scores_l.len()
        )));
    }
    Ok(match scheme {
        Scheme::Split => BatchEliminationMask::from_flags(
            scores_g.iter().map(|&s| s > th.th_global).collect(),
            scores_l.iter().map(|&s| s > th.th_local).collect(),
        ),
        Scheme::Joint => {
            let keep: Vec<bool> = scores_g
                .iter()
                .zip(scores_l)
                .map(|(&g, &l)| combine(SimilarityPair { global: g, local: l }, th.alpha, th.beta) > th.th_joint)
                .collect();
            BatchEliminationMask::from_flags(keep.clone(), keep)
        }
    })
}
