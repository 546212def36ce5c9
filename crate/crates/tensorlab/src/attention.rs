//! Fused multi-head scaled dot-product attention over a batch of
//! variable-length segments.

use crate::error::{Result, TensorError};
use crate::tensor::dot;

/// How query and key rows are grouped into independent sequences.
///
/// Query rows `0..q_lens[0]` attend to key rows `0..k_lens[0]`, the next
/// `q_lens[1]` query rows to the next `k_lens[1]` key rows, and so on.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub q_lens: Vec<usize>,
    pub k_lens: Vec<usize>,
    /// Query `i` may only see keys `j <= i` within its segment.
    pub causal: bool,
    /// One flag per key row; `false` keys are never attended to.
    pub key_mask: Option<Vec<bool>>,
}

impl AttnLayout {
    pub fn single(q_len: usize, k_len: usize) -> Self {
        Self::segments(vec![q_len], vec![k_len])
    }

    pub fn segments(q_lens: Vec<usize>, k_lens: Vec<usize>) -> Self {
        Self {
            q_lens,
            k_lens,
            causal: false,
            key_mask: None,
        }
    }

    pub fn causal(mut self) -> Self {
        self.causal = true;
        self
    }

    pub fn with_key_mask(mut self, mask: Vec<bool>) -> Self {
        self.key_mask = Some(mask);
        self
    }

    pub(crate) fn validate(&self, q_rows: usize, k_rows: usize) -> Result<()> {
        let bad = |msg: String| TensorError::InvalidArgument {
            op: "attention",
            msg,
        };
        if self.q_lens.len() != self.k_lens.len() {
            return Err(bad("q_lens and k_lens differ in segment count".into()));
        }
        if self.q_lens.iter().sum::<usize>() != q_rows {
            return Err(bad(format!("q_lens do not cover {q_rows} query rows")));
        }
        if self.k_lens.iter().sum::<usize>() != k_rows {
            return Err(bad(format!("k_lens do not cover {k_rows} key rows")));
        }
        if self.causal && self.q_lens != self.k_lens {
            return Err(bad("causal attention needs equal query/key lengths".into()));
        }
        if let Some(mask) = &self.key_mask {
            if mask.len() != k_rows {
                return Err(bad("key mask length differs from key rows".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn prob_len(&self, heads: usize) -> usize {
        self.q_lens
            .iter()
            .zip(&self.k_lens)
            .map(|(q, k)| heads * q * k)
            .sum()
    }

    fn visible(&self, k_off: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        self.key_mask.as_ref().is_none_or(|m| m[k_off + j])
    }
}

/// Returns the attention output and the cached probabilities.
pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    layout: &AttnLayout,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q_rows: usize = layout.q_lens.iter().sum();
    let mut out = vec![0.0; q_rows * d];
    let mut probs = vec![0.0; layout.prob_len(heads)];
    let mut scores = Vec::new();

    let (mut q_off, mut k_off, mut p_off) = (0, 0, 0);
    for (&lq, &lk) in layout.q_lens.iter().zip(&layout.k_lens) {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..lq {
                let qi = &q[(q_off + i) * d + c0..(q_off + i) * d + c0 + dh];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..lk {
                    let s = if layout.visible(k_off, i, j) {
                        let kj = &k[(k_off + j) * d + c0..(k_off + j) * d + c0 + dh];
                        dot(qi, kj) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                    max = max.max(s);
                    scores.push(s);
                }
                let prow = &mut probs[p_off + i * lk..p_off + (i + 1) * lk];
                if max == f64::NEG_INFINITY {
                    // every key hidden: the row attends to nothing
                    continue;
                }
                let mut total = 0.0;
                for (p, s) in prow.iter_mut().zip(&scores) {
                    *p = (s - max).exp();
                    total += *p;
                }
                let orow = &mut out[(q_off + i) * d + c0..(q_off + i) * d + c0 + dh];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p /= total;
                    if *p == 0.0 {
                        continue;
                    }
                    let vj = &v[(k_off + j) * d + c0..(k_off + j) * d + c0 + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += *p * x;
                    }
                }
            }
            p_off += lq * lk;
        }
        q_off += lq;
        k_off += lk;
    }
    (out, probs)
}

pub(crate) struct AttnGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    gout: &[f64],
    d: usize,
    heads: usize,
    layout: &AttnLayout,
) -> AttnGrads {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = Vec::new();

    let (mut q_off, mut k_off, mut p_off) = (0, 0, 0);
    for (&lq, &lk) in layout.q_lens.iter().zip(&layout.k_lens) {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..lq {
                let qrow = (q_off + i) * d + c0;
                let go = &gout[qrow..qrow + dh];
                let prow = &probs[p_off + i * lk..p_off + (i + 1) * lk];
                dp.clear();
                let mut weighted = 0.0;
                for (j, &p) in prow.iter().enumerate() {
                    let krow = (k_off + j) * d + c0;
                    let g = dot(go, &v[krow..krow + dh]);
                    weighted += p * g;
                    dp.push(g);
                    if p != 0.0 {
                        for (dvv, gv) in dv[krow..krow + dh].iter_mut().zip(go) {
                            *dvv += p * gv;
                        }
                    }
                }
                for (j, &p) in prow.iter().enumerate() {
                    let ds = p * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (k_off + j) * d + c0;
                    for c in 0..dh {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
            p_off += lq * lk;
        }
        q_off += lq;
        k_off += lk;
    }
    AttnGrads { dq, dk, dv }
}
