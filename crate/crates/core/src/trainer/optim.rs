//! AdamW, gradient clipping, the learning-rate schedule and EMA weights.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use tensorlab::{ParamStore, Tensor, TensorError};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Learning rate at 0-based iteration `iter` of `total` iterations: linear
/// warm-up to `cfg.lr`, then cosine decay to zero.
pub fn lr_at(iter: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_iters;
    if iter < warm {
        return cfg.lr * (iter + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1) as f64;
    let progress = ((iter - warm) as f64 / span).min(1.0);
    0.5 * cfg.lr * (1.0 + (PI * progress).cos())
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Tensor(TensorError::NonFinite("gradient norm".into())));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    Ok(norm)
}

/// Decoupled weight decay applies to matrices only; vectors (biases,
/// LayerNorm parameters, the temperature) are never decayed.
pub fn decays(t: &Tensor) -> bool {
    t.rank() >= 2
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter. Parameters without an
    /// entry in `grads` are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                Some(p) => {
                    return Err(Error::Shape(format!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                None => return Err(Error::Tensor(TensorError::UnknownParam(name.clone()))),
            }
            if !g.is_finite() {
                return Err(Error::Tensor(TensorError::NonFinite(format!("gradient of {name}"))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name).map(Tensor::data);
            let wd = if decays(p) { self.weight_decay } else { 0.0 };
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *w);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: ParamStore,
}

impl EmaState {
    pub fn new(params: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay {decay} outside [0,1)")));
        }
        Ok(Self {
            decay,
            shadow: params.clone(),
        })
    }

    /// `shadow ← λ·shadow + (1−λ)·param` for every parameter.
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        if !self.shadow.same_layout(params) {
            return Err(Error::Shape("EMA shadow and parameters differ in layout".into()));
        }
        let l = self.decay;
        for (name, s) in self.shadow.iter_mut() {
            let p = params.get(name).expect("same layout");
            for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = l * *a + (1.0 - l) * b;
            }
        }
        Ok(())
    }
}
