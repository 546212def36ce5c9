//! Parameter layout and the building blocks shared by every tower.

use rand::Rng;
use tensorlab::{AttnLayout, Graph, ParamStore, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
    Const(f64),
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Default)]
pub(crate) struct Layout(pub Vec<ParamSpec>);

impl Layout {
    pub fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    pub fn linear(&mut self, p: &str, d_in: usize, d_out: usize, bias: bool) {
        self.push(format!("{p}.weight"), &[d_in, d_out], Init::Normal);
        if bias {
            self.push(format!("{p}.bias"), &[d_out], Init::Zeros);
        }
    }

    pub fn layer_norm(&mut self, p: &str, d: usize) {
        self.push(format!("{p}.gain"), &[d], Init::Ones);
        self.push(format!("{p}.bias"), &[d], Init::Zeros);
    }

    /// Projections of one attention layer: `wq, bq, wk, bk, wv, bv, wo, bo`.
    pub fn attention(&mut self, p: &str, d: usize) {
        for m in ["q", "k", "v", "o"] {
            self.push(format!("{p}.w{m}"), &[d, d], Init::Normal);
            self.push(format!("{p}.b{m}"), &[d], Init::Zeros);
        }
    }

    pub fn block(&mut self, p: &str, d: usize, mlp_ratio: usize) {
        self.layer_norm(&format!("{p}.ln1"), d);
        self.attention(&format!("{p}.attn"), d);
        self.layer_norm(&format!("{p}.ln2"), d);
        self.linear(&format!("{p}.mlp.fc"), d, d * mlp_ratio, true);
        self.linear(&format!("{p}.mlp.proj"), d * mlp_ratio, d, true);
    }

    pub fn materialize<R: Rng + ?Sized>(&self, std: f64, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for spec in &self.0 {
            let t = match spec.init {
                Init::Normal => Tensor::trunc_normal(&spec.shape, std, rng),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::Const(c) => Tensor::full(&spec.shape, c),
            };
            store.insert(spec.name.clone(), t);
        }
        store
    }
}

/// Graph-side view of a parameter store.
pub(crate) struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub eps: f64,
}

impl Ctx<'_> {
    pub fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(self.store, name)?)
    }

    pub fn linear(&self, g: &mut Graph, p: &str, x: Var, bias: bool) -> Result<Var> {
        let w = self.p(g, &format!("{p}.weight"))?;
        let b = if bias {
            Some(self.p(g, &format!("{p}.bias"))?)
        } else {
            None
        };
        Ok(g.linear(x, w, b)?)
    }

    pub fn layer_norm(&self, g: &mut Graph, p: &str, x: Var) -> Result<Var> {
        let gain = self.p(g, &format!("{p}.gain"))?;
        let bias = self.p(g, &format!("{p}.bias"))?;
        Ok(g.layer_norm(x, gain, bias, self.eps)?)
    }

    fn proj(&self, g: &mut Graph, p: &str, m: &str, x: Var) -> Result<Var> {
        let w = self.p(g, &format!("{p}.w{m}"))?;
        let b = self.p(g, &format!("{p}.b{m}"))?;
        Ok(g.linear(x, w, Some(b))?)
    }

    /// Multi-head attention with its four projections, queries from `xq`
    /// and keys/values from `xkv`.
    pub fn attention(
        &self,
        g: &mut Graph,
        p: &str,
        xq: Var,
        xkv: Var,
        heads: usize,
        layout: &AttnLayout,
    ) -> Result<Var> {
        let q = self.proj(g, p, "q", xq)?;
        let k = self.proj(g, p, "k", xkv)?;
        let v = self.proj(g, p, "v", xkv)?;
        let a = g.attention(q, k, v, heads, layout)?;
        self.proj(g, p, "o", a)
    }

    /// Pre-norm transformer block with a QuickGELU MLP.
    pub fn block(&self, g: &mut Graph, p: &str, x: Var, heads: usize, layout: &AttnLayout) -> Result<Var> {
        let h = self.layer_norm(g, &format!("{p}.ln1"), x)?;
        let a = self.attention(g, &format!("{p}.attn"), h, h, heads, layout)?;
        let x = g.add(x, a)?;
        let h = self.layer_norm(g, &format!("{p}.ln2"), x)?;
        let h = self.linear(g, &format!("{p}.mlp.fc"), h, true)?;
        let h = g.quick_gelu(h);
        let h = self.linear(g, &format!("{p}.mlp.proj"), h, true)?;
        Ok(g.add(x, h)?)
    }
}
