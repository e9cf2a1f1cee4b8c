//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in execution order, which is already a topological
//! order, so the backward pass is a single reverse sweep over the tape.

use crate::error::{Error, Result};
use crate::kernels::{self, Activation};
use crate::tensor::{matmul_dims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    Activation { a: Var, kind: Activation },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    RowSlice { a: Var },
    Reshape { a: Var },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, head_dim: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    MeanPool { x: Var, batch: usize, seq: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced a non-finite value")))
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        check_finite(&value, what)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf. The tensor's storage is shared, not copied.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node { value: t.clone(), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node { value: t.clone(), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k, n) = matmul_dims(ta.shape(), tb.shape())?;
        let out = ta.matmul(tb)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, batch, m, k, n }, rg, "matmul")
    }

    /// `a[m,k] . b[n,k]^T`, the layout used for `x . W^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::Dimension(format!(
                "cannot multiply {:?} by transpose of {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt { a, b, m, k, n }, rg, "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!("cannot add {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add { a, b }, rg, "add")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * factor).collect())?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, factor }, rg, "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let nd = ta.shape().len();
        if nd < 2 {
            return Err(Error::Dimension("transpose needs at least two axes".into()));
        }
        let (rows, cols) = (ta.shape()[nd - 2], ta.shape()[nd - 1]);
        let batch = ta.numel() / (rows * cols).max(1);
        let out = ta.transpose()?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose { a, batch, rows, cols }, rg, "transpose")
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| kind.apply(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Activation { a, kind }, rg, "activation")
    }

    /// Row-wise layer norm over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *tx.shape().last().unwrap_or(&0);
        if tg.numel() != d || tb.numel() != d || d == 0 {
            return Err(Error::Dimension(format!(
                "layer norm over width {d} with gain {:?} and bias {:?}",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = tx.numel() / d;
        let mut out = vec![0.0; tx.numel()];
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            rstd[r] = kernels::layer_norm_row(
                &tx.data()[r * d..(r + 1) * d],
                tg.data(),
                tb.data(),
                &mut out[r * d..(r + 1) * d],
                &mut xhat[r * d..(r + 1) * d],
            );
        }
        let out = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, "layer_norm")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::Dimension("embedding table must be 2-D".into()));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("token {id} outside vocabulary of {v}")));
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg, "embedding")
    }

    /// First `k` rows of `a`, sharing storage. Gradients flow back into the
    /// parent's first `k` rows only.
    pub fn row_slice(&mut self, a: Var, k: usize) -> Result<Var> {
        let out = self.value(a).row_slice(k)?;
        let rg = self.rg(&[a]);
        self.nodes.push(Node { value: out, op: Op::RowSlice { a }, requires_grad: rg });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        self.nodes.push(Node { value: out, op: Op::Reshape { a }, requires_grad: rg });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Causal multi-head self-attention over `batch` sequences of `seq`
    /// tokens. `q`, `k`, `v` are `[batch*seq, heads*head_dim]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 2 {
            return Err(Error::Dimension("q, k and v must share one 2-D shape".into()));
        }
        let (rows, width) = (tq.shape()[0], tq.shape()[1]);
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention over {batch}x{seq} tokens and {heads} heads cannot use shape {:?}",
                tq.shape()
            )));
        }
        let head_dim = width / heads;
        let mut out = vec![0.0; rows * width];
        let mut probs = vec![0.0; batch * seq * heads * seq];
        for b in 0..batch {
            let base = b * seq * width;
            for t in 0..seq {
                let row = b * seq + t;
                let p_off = row * heads * seq;
                kernels::attend_row(
                    &tq.data()[row * width..(row + 1) * width],
                    &tk.data()[base..],
                    &tv.data()[base..],
                    width,
                    t + 1,
                    heads,
                    head_dim,
                    &mut out[row * width..(row + 1) * width],
                    &mut probs[p_off..p_off + heads * (t + 1)],
                );
            }
        }
        let out = Tensor::new(&[rows, width], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, batch, seq, heads, head_dim, probs }, rg, "attention")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::Dimension(format!(
                "{} targets for logits of shape {:?}",
                targets.len(),
                tl.shape()
            )));
        }
        let vocab = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            total += kernels::nll(row, t);
            kernels::softmax_in_place(row);
        }
        let loss = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(&[logits]);
        self.push(loss, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg, "cross_entropy")
    }

    /// Mean over the `seq` rows of each of `batch` sequences.
    pub fn mean_pool(&mut self, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || tx.shape()[0] != batch * seq || seq == 0 {
            return Err(Error::Dimension(format!("cannot pool {:?} as {batch}x{seq}", tx.shape())));
        }
        let d = tx.shape()[1];
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let o = &mut out[b * d..(b + 1) * d];
            for t in 0..seq {
                for (oi, xi) in o.iter_mut().zip(tx.row(b * seq + t)) {
                    *oi += xi;
                }
            }
            o.iter_mut().for_each(|v| *v /= seq as f64);
        }
        let out = Tensor::new(&[batch, d], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanPool { x, batch, seq }, rg, "mean_pool")
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::Dimension("backward requires a scalar output".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], var: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.grad_slot(grads, a) {
                    for bi in 0..batch {
                        kernels::matmul_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    for bi in 0..batch {
                        kernels::matmul_tn_acc(
                            &va[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.grad_slot(grads, a) {
                    kernels::matmul_nn_acc(g, vb, ga, m, n, k);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    kernels::matmul_tn_acc(g, va, gb, m, n, k);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
                }
            }
            &Op::Transpose { a, batch, rows, cols } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    // g has shape [cols, rows] per batch
                    for bi in 0..batch {
                        let off = bi * rows * cols;
                        for c in 0..cols {
                            for r in 0..rows {
                                ga[off + r * cols + c] += g[off + c * rows + r];
                            }
                        }
                    }
                }
            }
            &Op::Activation { a, kind } => {
                let va = self.value(a).data();
                if let Some(ga) = self.grad_slot(grads, a) {
                    for ((gi, &xi), &gy) in ga.iter_mut().zip(va).zip(g) {
                        *gi += gy * kind.derivative(xi);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).numel();
                let rows = rstd.len();
                let gamma = self.value(*gain).data().to_vec();
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    for r in 0..rows {
                        for i in 0..d {
                            gg[i] += g[r * d + i] * xhat[r * d + i];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for r in 0..rows {
                        for i in 0..d {
                            gb[i] += g[r * d + i];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for i in 0..d {
                            dxhat[i] = gr[i] * gamma[i];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for i in 0..d {
                            gx[r * d + i] += rstd[r] * (dxhat[i] - mean_d - xr[i] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            &Op::RowSlice { a } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga[..g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, head_dim, probs } => {
                self.attention_backward(*q, *k, *v, *batch, *seq, *heads, *head_dim, probs, g, grads);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.value(*logits).shape()[1];
                let scale = g[0] / targets.len() as f64;
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (j, gj) in row.iter_mut().enumerate() {
                            let y = if j == t { 1.0 } else { 0.0 };
                            *gj += scale * (probs[r * vocab + j] - y);
                        }
                    }
                }
            }
            &Op::MeanPool { x, batch, seq } => {
                let d = self.value(x).shape()[1];
                if let Some(gx) = self.grad_slot(grads, x) {
                    for b in 0..batch {
                        for t in 0..seq {
                            let row = &mut gx[(b * seq + t) * d..(b * seq + t + 1) * d];
                            for (xi, gi) in row.iter_mut().zip(&g[b * d..(b + 1) * d]) {
                                *xi += gi / seq as f64;
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let width = heads * head_dim;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; vq.len()];
        let mut gk = vec![0.0; vk.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut dscore = vec![0.0; seq];
        for b in 0..batch {
            for t in 0..seq {
                let row = b * seq + t;
                let p_off = row * heads * seq;
                let n = t + 1;
                for h in 0..heads {
                    let lo = h * head_dim;
                    let p = &probs[p_off + h * n..p_off + (h + 1) * n];
                    let go = &g[row * width + lo..row * width + lo + head_dim];
                    let mut weighted = 0.0;
                    for s in 0..n {
                        let key_row = (b * seq + s) * width + lo;
                        let dp = kernels::dot(go, &vv[key_row..key_row + head_dim]);
                        dscore[s] = dp;
                        weighted += p[s] * dp;
                        for (gvi, goi) in gv[key_row..key_row + head_dim].iter_mut().zip(go) {
                            *gvi += p[s] * goi;
                        }
                    }
                    let q_row = row * width + lo;
                    for s in 0..n {
                        let ds = p[s] * (dscore[s] - weighted) * scale;
                        let key_row = (b * seq + s) * width + lo;
                        for i in 0..head_dim {
                            gq[q_row + i] += ds * vk[key_row + i];
                            gk[key_row + i] += ds * vq[q_row + i];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.grad_slot(grads, var) {
                slot.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
            }
        }
    }
}
