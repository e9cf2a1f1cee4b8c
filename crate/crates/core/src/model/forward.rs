//! Forward passes: a tape-recorded one for training and a direct one for
//! evaluation and cached decoding. Both run the same kernels row by row, so
//! they agree bitwise.

use super::{LayerParams, MatDecoderModel, LayerConfig};
use crate::cache::KvCache;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::Tensor;

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let d = x.row_len();
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; d];
    for r in 0..x.rows() {
        kernels::layer_norm_row(x.row(r), gain.data(), bias.data(), &mut out[r * d..(r + 1) * d], &mut xhat);
    }
    Tensor::new(x.shape(), out).expect("shape preserved")
}

fn linear_nt(x: &Tensor, w: &Tensor) -> Tensor {
    let (m, k, n) = (x.rows(), x.row_len(), w.rows());
    let mut out = vec![0.0; m * n];
    kernels::matmul_nt(x.data(), w.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out).expect("shape computed")
}

fn add_in_place(x: &mut Tensor, y: &Tensor) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

impl MatDecoderModel {
    fn layer(&self, layer: usize) -> Result<&LayerParams> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))
    }

    fn check_gran(&self, layer: usize, gran: usize) -> Result<()> {
        let cap = self.layer_caps.as_slice().get(layer).copied();
        match cap {
            Some(cap) if gran <= cap => Ok(()),
            Some(cap) => Err(Error::Config(format!(
                "granularity {} exceeds the {} stored for layer {layer}",
                gran + 1,
                cap + 1
            ))),
            None => Err(Error::Config(format!("layer {layer} out of range"))),
        }
    }

    /// `sigma(x . W1[0:m]^T) . W2[0:m]` for granularity `gran` (0-based).
    pub fn ffn_forward(&self, x: &Tensor, layer: usize, gran: usize) -> Result<Tensor> {
        self.check_gran(layer, gran)?;
        let p = self.layer(layer)?;
        if x.shape().len() != 2 || x.row_len() != self.config.d_model {
            return Err(Error::Dimension(format!("FFN input must be [T, {}], got {:?}", self.config.d_model, x.shape())));
        }
        let m = self.config.granularity.width(gran);
        let w1 = p.w1.row_slice(m)?;
        let w2 = p.w2.row_slice(m)?;
        let mut hidden = linear_nt(x, &w1);
        let sigma = self.config.sigma;
        hidden.data_mut().iter_mut().for_each(|v| *v = sigma.apply(*v));
        hidden.matmul(&w2)
    }

    /// Causal self-attention through the first `h_gran` heads. With a cache,
    /// `x` holds the rows for positions `cache.len()..` and their keys and
    /// values are appended to the cache.
    pub fn attention_forward(&self, x: &Tensor, layer: usize, gran: usize, cache: Option<&mut KvCache>) -> Result<Tensor> {
        self.check_gran(layer, gran)?;
        let p = self.layer(layer)?;
        let heads = self.config.heads_at(gran);
        let hd = self.config.head_dim();
        let width = heads * hd;
        let t = x.rows();
        let q = linear_nt(x, &p.wq.row_slice(width)?);
        let k = linear_nt(x, &p.wk.row_slice(width)?);
        let v = linear_nt(x, &p.wv.row_slice(width)?);
        let mut out = vec![0.0; t * width];
        let mut probs = Vec::new();
        let attend = |keys: &[f64], values: &[f64], start: usize, out: &mut [f64], probs: &mut Vec<f64>| {
            for r in 0..t {
                let n = start + r + 1;
                probs.resize(heads * n, 0.0);
                kernels::attend_row(q.row(r), keys, values, width, n, heads, hd, &mut out[r * width..(r + 1) * width], probs);
            }
        };
        match cache {
            Some(cache) => {
                let start = cache.len();
                if cache.n_layers() != self.config.n_layers {
                    return Err(Error::Cache(format!(
                        "cache has {} layers, model has {}",
                        cache.n_layers(),
                        self.config.n_layers
                    )));
                }
                cache.append(layer, k.data(), v.data(), width)?;
                attend(cache.keys(layer), cache.values(layer), start, &mut out, &mut probs);
            }
            None => attend(k.data(), v.data(), 0, &mut out, &mut probs),
        }
        Tensor::new(&[t, width], out)?.matmul(&p.wo.row_slice(width)?)
    }

    /// Final layer-normed hidden states for `tokens`, continuing from `cache`
    /// when one is given.
    pub fn hidden_states(&self, tokens: &[usize], config: &LayerConfig, mut cache: Option<&mut KvCache>) -> Result<Tensor> {
        self.check_config(config)?;
        let start = cache.as_ref().map_or(0, |c| c.len());
        if start + tokens.len() > self.config.context_len {
            return Err(Error::Length(format!(
                "{} positions exceed the context length {}",
                start + tokens.len(),
                self.config.context_len
            )));
        }
        let d = self.config.d_model;
        let vocab = self.config.vocab_size;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= vocab {
                return Err(Error::Index(format!("token {tok} outside vocabulary of {vocab}")));
            }
            let pos = self.position_embedding.row(start + i);
            x.extend(self.token_embedding.row(tok).iter().zip(pos).map(|(a, b)| a + b));
        }
        let mut x = Tensor::new(&[tokens.len(), d], x)?;
        for (j, (p, &gran)) in self.layers.iter().zip(config.iter()).enumerate() {
            let h = layer_norm(&x, &p.ln1_gain, &p.ln1_bias);
            let a = self.attention_forward(&h, j, gran, cache.as_deref_mut())?;
            add_in_place(&mut x, &a);
            let h = layer_norm(&x, &p.ln2_gain, &p.ln2_bias);
            let f = self.ffn_forward(&h, j, gran)?;
            add_in_place(&mut x, &f);
        }
        if let Some(c) = cache {
            c.advance(tokens.len())?;
        }
        let out = layer_norm(&x, &self.final_gain, &self.final_bias);
        if !out.is_finite() {
            return Err(Error::Numeric("forward pass produced non-finite activations".into()));
        }
        Ok(out)
    }

    /// Tied output projection.
    pub fn logits_from_hidden(&self, hidden: &Tensor) -> Tensor {
        linear_nt(hidden, &self.token_embedding)
    }

    /// `[T, vocab]` logits for a fresh sequence.
    pub fn forward(&self, tokens: &[usize], config: &LayerConfig) -> Result<Tensor> {
        let h = self.hidden_states(tokens, config, None)?;
        Ok(self.logits_from_hidden(&h))
    }

    /// Logits for `tokens` appended after the positions already in `cache`.
    pub fn forward_cached(&self, tokens: &[usize], config: &LayerConfig, cache: &mut KvCache) -> Result<Tensor> {
        let h = self.hidden_states(tokens, config, Some(cache))?;
        Ok(self.logits_from_hidden(&h))
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams { vars: self.tensors().into_iter().map(|t| graph.param(t)).collect() }
    }

    /// Final hidden states `[batch*seq, d_model]` as a graph node.
    pub fn graph_hidden(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        config: &LayerConfig,
    ) -> Result<Var> {
        self.check_config(config)?;
        if tokens.len() != batch * seq {
            return Err(Error::Dimension(format!("{} tokens do not form {batch}x{seq}", tokens.len())));
        }
        if seq > self.config.context_len {
            return Err(Error::Length(format!("sequence of {seq} exceeds context {}", self.config.context_len)));
        }
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = graph.embedding(bound.token_embedding(), tokens)?;
        let pos = graph.embedding(bound.position_embedding(), &positions)?;
        let mut x = graph.add(tok, pos)?;
        let hd = self.config.head_dim();
        for (j, &gran) in config.iter().enumerate() {
            let l = bound.layer(j);
            let heads = self.config.heads_at(gran);
            let width = heads * hd;
            let m = self.config.granularity.width(gran);

            let h = graph.layer_norm(x, l[0], l[1])?;
            let wq = graph.row_slice(l[2], width)?;
            let wk = graph.row_slice(l[3], width)?;
            let wv = graph.row_slice(l[4], width)?;
            let wo = graph.row_slice(l[5], width)?;
            let q = graph.matmul_nt(h, wq)?;
            let k = graph.matmul_nt(h, wk)?;
            let v = graph.matmul_nt(h, wv)?;
            let att = graph.causal_attention(q, k, v, batch, seq, heads)?;
            let att = graph.matmul(att, wo)?;
            x = graph.add(x, att)?;

            let h = graph.layer_norm(x, l[6], l[7])?;
            let w1 = graph.row_slice(l[8], m)?;
            let w2 = graph.row_slice(l[9], m)?;
            let pre = graph.matmul_nt(h, w1)?;
            let act = graph.activation(pre, self.config.sigma)?;
            let ffn = graph.matmul(act, w2)?;
            x = graph.add(x, ffn)?;
        }
        let (g, b) = bound.final_ln();
        graph.layer_norm(x, g, b)
    }

    pub fn graph_logits(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        config: &LayerConfig,
    ) -> Result<Var> {
        let h = self.graph_hidden(graph, bound, tokens, batch, seq, config)?;
        graph.matmul_nt(h, bound.token_embedding())
    }

    /// Mean next-token cross-entropy of `batch` rows of `seq` inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn graph_lm_loss(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
        config: &LayerConfig,
    ) -> Result<Var> {
        let logits = self.graph_logits(graph, bound, inputs, batch, seq, config)?;
        graph.softmax_cross_entropy(logits, targets)
    }
}

/// Graph handles for a model's parameters, in [`MatDecoderModel::named_tensors`] order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps leaves created elsewhere; `vars` must follow the model's
    /// tensor order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn token_embedding(&self) -> Var {
        self.vars[0]
    }

    pub fn position_embedding(&self) -> Var {
        self.vars[1]
    }

    fn layer(&self, j: usize) -> &[Var] {
        &self.vars[2 + 10 * j..2 + 10 * (j + 1)]
    }

    fn final_ln(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}
