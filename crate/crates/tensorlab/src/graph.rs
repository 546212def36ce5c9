//! Dynamic tape. Every forward op appends a node; `backward` walks the tape
//! once in reverse.

use std::collections::BTreeMap;

use crate::attention::{self, AttnLayout};
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    QuickGelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    SumAll(Var),
    RowNorms(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    NllRows {
        logits: Var,
        targets: Vec<usize>,
        denom: f64,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    BlockFrobenius {
        x: Var,
        row_lens: Vec<usize>,
        col_lens: Vec<usize>,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Operation tape for one forward/backward pass.
///
/// Nodes are appended in evaluation order, which is a topological order of
/// the computation. A graph supports exactly one backward pass.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Anonymous differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers the named parameter from `store` as a differentiable leaf.
    /// Repeated calls with the same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes later `param(_, name)` calls return `v` instead of reading the
    /// store. Used to differentiate with respect to an externally built node.
    pub fn bind_param(&mut self, name: &str, v: Var) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(TensorError::InvalidArgument {
                op: "bind_param",
                msg: format!("{name} is already registered"),
            });
        }
        self.params.insert(name.to_string(), v);
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward target with respect to `v`, if any
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Gradients for every registered parameter. Parameters the loss does not
    /// depend on get zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// NaN/Inf barrier over every value and every gradient on the tape.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.is_finite() {
                return Err(TensorError::NonFinite(format!("value of node {i}")));
            }
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let out = node.value.data();

        // gradient buffer of `v`, or None when `v` needs no gradient
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = buf!(v) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(d) = buf!(*x) {
                    add_into(d, g);
                }
                if let Some(d) = buf!(*b) {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = buf!(*a) {
                    for ((dv, gv), y) in d.iter_mut().zip(g).zip(bv) {
                        *dv += gv * y;
                    }
                }
                if let Some(d) = buf!(*b) {
                    for ((dv, gv), x) in d.iter_mut().zip(g).zip(av) {
                        *dv += gv * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = buf!(*x) {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += c * gv;
                    }
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = val(*s)[0];
                let ds: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                if let Some(d) = buf!(*x) {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += sv * gv;
                    }
                }
                if let Some(d) = buf!(*s) {
                    d[0] += ds;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.cols();
                if nodes[a.0].requires_grad {
                    let bv = val(*b);
                    let d = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm_nt_acc(g, bv, d, m, n, k);
                }
                if nodes[b.0].requires_grad {
                    let av = val(*a);
                    let d = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm_tn_acc(av, g, d, m, k, n);
                }
            }
            Op::Transpose(x) => {
                if let Some(d) = buf!(*x) {
                    let (m, n) = nodes[x.0].value.dims2();
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(d) = buf!(*x) {
                    for ((dv, gv), y) in d.iter_mut().zip(g).zip(out) {
                        *dv += gv * y;
                    }
                }
            }
            Op::Log(x) => {
                let xv = val(*x);
                if let Some(d) = buf!(*x) {
                    for ((dv, gv), x) in d.iter_mut().zip(g).zip(xv) {
                        *dv += gv / x;
                    }
                }
            }
            Op::QuickGelu(x) => {
                let xv = val(*x);
                if let Some(d) = buf!(*x) {
                    for ((dv, gv), &x) in d.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(1.702 * x);
                        *dv += gv * (s + 1.702 * x * s * (1.0 - s));
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if let Some(d) = buf!(*x) {
                    let n = node.value.cols();
                    for ((drow, grow), prow) in
                        d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n))
                    {
                        let inner: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), p) in drow.iter_mut().zip(grow).zip(prow) {
                            *dv += p * (gv - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gv = val(*gain);
                if let Some(d) = buf!(*gain) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((dv, a), b) in d.iter_mut().zip(grow).zip(hrow) {
                            *dv += a * b;
                        }
                    }
                }
                if let Some(d) = buf!(*bias) {
                    for grow in g.chunks(n) {
                        add_into(d, grow);
                    }
                }
                if let Some(d) = buf!(*x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for c in 0..n {
                            dxhat[c] = grow[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh =
                            dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let drow = &mut d[r * n..(r + 1) * n];
                        for c in 0..n {
                            drow[c] += rstd[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(d) = buf!(*table) {
                    let n = node.value.cols();
                    for (grow, &id) in g.chunks(n).zip(ids) {
                        add_into(&mut d[id * n..(id + 1) * n], grow);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(d) = buf!(p) {
                        add_into(d, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(d) = buf!(*x) {
                    let n = node.value.cols();
                    for (grow, &r) in g.chunks(n).zip(idx) {
                        add_into(&mut d[r * n..(r + 1) * n], grow);
                    }
                }
            }
            Op::MeanRows(x) => {
                if let Some(d) = buf!(*x) {
                    let (m, n) = nodes[x.0].value.dims2();
                    for drow in d.chunks_mut(n) {
                        for (dv, gv) in drow.iter_mut().zip(g) {
                            *dv += gv / m as f64;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(d) = buf!(*x) {
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                }
            }
            Op::RowNorms(x) => {
                let xv = val(*x);
                if let Some(d) = buf!(*x) {
                    let n = nodes[x.0].value.cols();
                    for (r, (drow, xrow)) in d.chunks_mut(n).zip(xv.chunks(n)).enumerate() {
                        if out[r] == 0.0 {
                            continue;
                        }
                        for (dv, xv) in drow.iter_mut().zip(xrow) {
                            *dv += g[r] * xv / out[r];
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if let Some(d) = buf!(*x) {
                    let n = node.value.cols();
                    for (r, ((drow, grow), yrow)) in
                        d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)).enumerate()
                    {
                        let inner: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += (gv - y * inner) / norms[r];
                        }
                    }
                }
            }
            Op::NllRows {
                logits,
                targets,
                denom,
                probs,
            } => {
                if let Some(d) = buf!(*logits) {
                    let n = nodes[logits.0].value.cols();
                    let scale = g[0] / denom;
                    for (r, &t) in targets.iter().enumerate() {
                        let drow = &mut d[r * n..(r + 1) * n];
                        let prow = &probs[r * n..(r + 1) * n];
                        for (dv, p) in drow.iter_mut().zip(prow) {
                            *dv += scale * p;
                        }
                        drow[t] -= scale;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let d = nodes[q.0].value.cols();
                let ag = attention::backward(val(*q), val(*k), val(*v), probs, g, d, *heads, layout);
                for (var, gv) in [(*q, ag.dq), (*k, ag.dk), (*v, ag.dv)] {
                    if let Some(buf) = buf!(var) {
                        add_into(buf, &gv);
                    }
                }
            }
            Op::BlockFrobenius {
                x,
                row_lens,
                col_lens,
            } => {
                let xv = val(*x);
                if let Some(d) = buf!(*x) {
                    let n = nodes[x.0].value.cols();
                    let nc = col_lens.len();
                    let col_seg = segment_ids(col_lens);
                    let mut r = 0;
                    for (a, &len) in row_lens.iter().enumerate() {
                        for _ in 0..len {
                            for c in 0..n {
                                let b = col_seg[c];
                                let o = out[a * nc + b];
                                if o > 0.0 {
                                    d[r * n + c] += g[a * nc + b] * xv[r * n + c] / o;
                                }
                            }
                            r += 1;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn segment_ids(lens: &[usize]) -> Vec<usize> {
    lens.iter()
        .enumerate()
        .flat_map(|(s, &len)| std::iter::repeat_n(s, len))
        .collect()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
