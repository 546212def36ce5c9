//! Forward constructors for every differentiable primitive.

use crate::attention::{self, AttnLayout};
use crate::error::{Result, TensorError};
use crate::graph::{segment_ids, sigmoid, Graph, Op, Var};
use crate::tensor::{gemm_acc, Tensor};

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

impl Graph {
    fn unary(&mut self, x: Var, data: Vec<f64>, op: Op) -> Var {
        let value = Tensor::new(self.value(x).shape(), data).expect("unary shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn matrix(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(invalid(op, format!("expected a matrix, got shape {:?}", t.shape())));
        }
        Ok(t.dims2())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x[m×n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.numel() != n {
            return Err(mismatch("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        self.unary(x, data, Op::Scale(x, c))
    }

    /// Multiplies every entry of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(invalid("scale_by", "scale must hold exactly one value"));
        }
        let c = self.value(s).item();
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.value(x).shape(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.matrix("transpose", x)?;
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        self.unary(x, data, Op::Exp(x))
    }

    /// Natural log. Non-positive inputs produce NaN/-inf, caught by
    /// [`Graph::check_finite`].
    pub fn log(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        self.unary(x, data, Op::Log(x))
    }

    /// `x · sigmoid(1.702 x)`
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * sigmoid(1.702 * v))
            .collect();
        self.unary(x, data, Op::QuickGelu(x))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let n = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                softmax_in_place(row);
            }
        }
        self.unary(x, data, Op::SoftmaxRows(x))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if n == 0 {
            return Err(invalid("layer_norm", "feature dimension must be at least 1"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.numel() != n {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("embedding", format!("id {bad} outside table of {v} rows")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid("concat_rows", "nothing to concatenate"));
        };
        let n = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row selection; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(invalid("gather_rows", format!("row {bad} outside {m} rows")));
        }
        let t = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[idx.len(), n], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows, giving a `1×n` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if m == 0 {
            return Err(invalid("mean_rows", "no rows to average"));
        }
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v / m as f64;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[1, n], out)?, Op::MeanRows(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of every row, shape `[m]`.
    pub fn row_norms(&mut self, x: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        let out: Vec<f64> = (0..m)
            .map(|r| {
                let row = &self.value(x).data()[r * n..(r + 1) * n];
                row.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[m], out).expect("norms"), Op::RowNorms(x), rg)
    }

    /// Scales each row to unit Euclidean norm. A zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        let mut norms = Vec::with_capacity(m);
        let mut out = tx.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::ZeroNorm {
                    op: "normalize_rows",
                    row: r,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    /// Pairwise cosine similarity between the rows of `a[m×d]` and `b[n×d]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(mismatch("cosine_rows", ta, tb));
        }
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// `Σ_r −log softmax(logits_r)[targets_r] / denom`.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize], denom: f64) -> Result<Var> {
        let (m, n) = self.value(logits).dims2();
        if targets.len() != m {
            return Err(invalid(
                "nll_rows",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(invalid("nll_rows", format!("target {bad} outside {n} classes")));
        }
        if !(denom > 0.0) {
            return Err(invalid("nll_rows", "denominator must be positive"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::NllRows {
                logits,
                targets: targets.to_vec(),
                denom,
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy with integer targets. No rows gives a constant zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        if targets.is_empty() {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        self.nll_rows(logits, targets, targets.len() as f64)
    }

    /// Multi-head scaled dot-product attention on already projected
    /// queries, keys and values.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttnLayout,
    ) -> Result<Var> {
        let (mq, d) = self.matrix("attention", q)?;
        let (mk, dk) = self.matrix("attention", k)?;
        let (mv, dv) = self.matrix("attention", v)?;
        if dk != d || dv != d || mk != mv {
            return Err(mismatch("attention", self.value(q), self.value(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(invalid("attention", format!("{d} columns not divisible by {heads} heads")));
        }
        layout.validate(mq, mk)?;
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            heads,
            layout,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(&[mq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout: layout.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Frobenius norm of every block of `x` when its rows are split by
    /// `row_lens` and its columns by `col_lens`.
    pub fn block_frobenius(&mut self, x: Var, row_lens: &[usize], col_lens: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix("block_frobenius", x)?;
        if row_lens.iter().sum::<usize>() != m || col_lens.iter().sum::<usize>() != n {
            return Err(invalid("block_frobenius", "segments do not cover the matrix"));
        }
        let (nr, nc) = (row_lens.len(), col_lens.len());
        let col_seg = segment_ids(col_lens);
        let row_seg = segment_ids(row_lens);
        let mut acc = vec![0.0; nr * nc];
        let data = self.value(x).data();
        for r in 0..m {
            let a = row_seg[r];
            for c in 0..n {
                let v = data[r * n + c];
                acc[a * nc + col_seg[c]] += v * v;
            }
        }
        acc.iter_mut().for_each(|v| *v = v.sqrt());
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[nr, nc], acc)?,
            Op::BlockFrobenius {
                x,
                row_lens: row_lens.to_vec(),
                col_lens: col_lens.to_vec(),
            },
            rg,
        ))
    }

    /// `x · w + b` with `w` laid out `[in×out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
