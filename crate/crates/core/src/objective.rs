//! Contrastive, row-eliminated contrastive and masked-keyword losses, and
//! their scheduled combination.

use serde::{Deserialize, Serialize};
use tensorlab::{Graph, Tensor, Var};

use crate::alignment::BatchEliminationMask;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the masked-keyword loss.
    pub mlm_weight: f64,
    /// First 0-based epoch at which elimination applies.
    pub drop_epoch: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mlm_weight: 0.5,
            drop_epoch: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub info_global: f64,
    pub info_local: f64,
    pub mlm: f64,
    pub total: f64,
    pub r_global: usize,
    pub r_local: usize,
}

/// `1/γ` as a constant node, for fixed-temperature callers.
pub fn inverse_temperature(g: &mut Graph, temp: f64) -> Result<Var> {
    if !(temp > 0.0) {
        return Err(Error::Config(format!("temperature {temp} must be positive")));
    }
    Ok(g.constant(Tensor::new(&[1], vec![1.0 / temp])?))
}

fn directional(g: &mut Graph, logits: Var, rows: Option<&[usize]>, b: usize) -> Result<Var> {
    let (x, targets) = match rows {
        None => (logits, (0..b).collect::<Vec<_>>()),
        Some(rows) => (g.gather_rows(logits, rows)?, rows.to_vec()),
    };
    Ok(g.nll_rows(x, &targets, b as f64)?)
}

fn info_nce_rows(g: &mut Graph, sim: Var, rows: Option<&[usize]>, inv_temp: Var) -> Result<Var> {
    let (m, n) = g.value(sim).dims2();
    if m != n || g.value(sim).rank() != 2 {
        return Err(Error::Shape(format!("similarity must be square, got {:?}", g.value(sim).shape())));
    }
    if m < 2 {
        return Err(Error::Shape(format!("contrastive loss needs B >= 2, got {m}")));
    }
    let logits = g.scale_by(sim, inv_temp)?;
    let i2t = directional(g, logits, rows, m)?;
    let t = g.transpose(logits)?;
    let t2i = directional(g, t, rows, m)?;
    Ok(g.add(i2t, t2i)?)
}

/// Symmetric InfoNCE over a `B × B` similarity matrix whose diagonal holds
/// the matched pairs: the image→text and text→image negative log
/// likelihoods, summed and divided by `B`.
pub fn info_nce(g: &mut Graph, sim: Var, inv_temp: Var) -> Result<Var> {
    info_nce_rows(g, sim, None, inv_temp)
}

/// InfoNCE with the rows of eliminated pairs removed in both directions.
/// Eliminated pairs still act as negatives for the kept rows, and the sum is
/// still divided by the full `B`. Returns the loss and the eliminated count.
pub fn info_nce_eliminated(g: &mut Graph, sim: Var, keep: &[bool], inv_temp: Var) -> Result<(Var, usize)> {
    let b = g.value(sim).rows();
    if keep.len() != b {
        return Err(Error::Shape(format!("{} keep flags for a batch of {b}", keep.len())));
    }
    let rows: Vec<usize> = (0..b).filter(|&i| keep[i]).collect();
    if rows.is_empty() {
        return Err(Error::AllRowsEliminated);
    }
    let removed = b - rows.len();
    let loss = if removed == 0 {
        info_nce_rows(g, sim, None, inv_temp)?
    } else {
        info_nce_rows(g, sim, Some(&rows), inv_temp)?
    };
    Ok((loss, removed))
}

/// Mean cross-entropy over masked slots; zero when there are none.
pub fn mlm_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(logits, targets)?)
}

/// Graph nodes the scheduled loss is assembled from.
pub struct LossInputs<'a> {
    pub sim_global: Var,
    pub sim_local: Var,
    pub inv_temp: Var,
    pub mlm_logits: Var,
    pub mlm_targets: &'a [usize],
}

/// `info_global + info_local + mlm_weight·mlm`, with row elimination from
/// `mask` once `epoch >= drop_epoch`. A path whose rows are all eliminated
/// contributes zero.
pub fn total_loss(
    g: &mut Graph,
    parts: &LossInputs,
    epoch: usize,
    cfg: &LossConfig,
    mask: Option<&BatchEliminationMask>,
) -> Result<(Var, LossBreakdown)> {
    let mask = match mask {
        Some(_) if epoch < cfg.drop_epoch => {
            log::warn!("elimination mask supplied at epoch {epoch} before drop epoch {}; ignored", cfg.drop_epoch);
            None
        }
        m => m,
    };
    let mut out = LossBreakdown::default();
    let path = |g: &mut Graph, sim: Var, keep: Option<&[bool]>| -> Result<(Option<Var>, usize)> {
        match keep {
            None => Ok((Some(info_nce(g, sim, parts.inv_temp)?), 0)),
            Some(k) => match info_nce_eliminated(g, sim, k, parts.inv_temp) {
                Ok((v, r)) => Ok((Some(v), r)),
                Err(Error::AllRowsEliminated) => Ok((None, k.len())),
                Err(e) => Err(e),
            },
        }
    };
    let (lg, rg) = path(g, parts.sim_global, mask.map(|m| m.keep_global.as_slice()))?;
    let (ll, rl) = path(g, parts.sim_local, mask.map(|m| m.keep_local.as_slice()))?;
    out.r_global = rg;
    out.r_local = rl;
    let mlm = mlm_loss(g, parts.mlm_logits, parts.mlm_targets)?;
    out.mlm = g.value(mlm).item();

    let mut terms = Vec::new();
    if let Some(v) = lg {
        out.info_global = g.value(v).item();
        terms.push(v);
    }
    if let Some(v) = ll {
        out.info_local = g.value(v).item();
        terms.push(v);
    }
    if cfg.mlm_weight != 0.0 && !parts.mlm_targets.is_empty() {
        terms.push(g.scale(mlm, cfg.mlm_weight));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    for &t in terms.iter().skip(1) {
        total = g.add(total, t)?;
    }
    out.total = g.value(total).item();
    Ok((total, out))
}
