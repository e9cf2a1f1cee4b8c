//! The nested decoder-only transformer.
//!
//! One parameter store holds the universal model. Granularity `i` of a
//! block uses the first `m_i` rows of `W1` and `W2` (and, with head nesting,
//! the first `h_i` heads of the attention projections), so every submodel is
//! a set of prefix views into the same buffers.

pub mod accounting;
pub mod config;
mod forward;

pub use accounting::{flops_breakdown, flops_per_token, param_count, FlopsBreakdown, Phase};
pub use config::{all_configs, mix_n_match_count, GranularitySpec, LayerConfig, ModelConfig};
pub use forward::BoundParams;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// `[heads*head_dim, d_model]`, rows grouped by head.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[heads*head_dim, d_model]`: row block `h` consumes head `h`'s output.
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `[d_ff, d_model]`
    pub w1: Tensor,
    /// `[d_ff, d_model]`
    pub w2: Tensor,
}

const LAYER_TENSORS: [&str; 10] =
    ["ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.w2"];

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.w2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.w2,
        ]
    }
}

/// Parameters of a universal MatFormer, or of a submodel extracted from one.
///
/// `layer_caps` records the largest granularity stored for each layer: the
/// universal model stores `[g]*l`, an extracted Mix'n'Match model stores
/// exactly the rows its configuration uses.
#[derive(Debug, Clone)]
pub struct MatDecoderModel {
    config: ModelConfig,
    layer_caps: LayerConfig,
    /// `[vocab, d_model]`, also the output projection.
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl MatDecoderModel {
    /// Fresh universal model. Weights are fully determined by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, "init");
        let d = config.d_model;
        let width = config.n_heads * config.head_dim();
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let token_embedding = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
        let position_embedding = Tensor::randn(&[config.context_len, d], INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[width, d], INIT_STD, &mut rng),
                wk: Tensor::randn(&[width, d], INIT_STD, &mut rng),
                wv: Tensor::randn(&[width, d], INIT_STD, &mut rng),
                wo: Tensor::randn(&[width, d], resid_std, &mut rng),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w1: Tensor::randn(&[config.d_ff, d], INIT_STD, &mut rng),
                w2: Tensor::randn(&[config.d_ff, d], resid_std, &mut rng),
            })
            .collect();
        let layer_caps = config.full();
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            layer_caps,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer_caps(&self) -> &LayerConfig {
        &self.layer_caps
    }

    /// The largest configuration this model can run.
    pub fn full_config(&self) -> LayerConfig {
        self.layer_caps.clone()
    }

    pub fn is_universal(&self) -> bool {
        self.layer_caps == self.config.full()
    }

    /// Validates `config` against the architecture and the stored rows.
    pub fn check_config(&self, config: &LayerConfig) -> Result<()> {
        self.config.check_layer_config(config)?;
        if !config.nested_in(&self.layer_caps) {
            return Err(Error::Config(format!(
                "configuration [{config}] needs rows this model does not store (caps [{}])",
                self.layer_caps
            )));
        }
        Ok(())
    }

    /// Canonical tensor names, in checkpoint and optimiser order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (j, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{j}.{name}"), t));
            }
        }
        out.push(("final_ln.gain".to_string(), &self.final_gain));
        out.push(("final_ln.bias".to_string(), &self.final_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_tensors(config: ModelConfig, layer_caps: LayerConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        config.check_layer_config(&layer_caps)?;
        let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = map.remove(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let d = config.d_model;
        let hd = config.head_dim();
        let token_embedding = take("token_embedding", &[config.vocab_size, d])?;
        let position_embedding = take("position_embedding", &[config.context_len, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for (j, &cap) in layer_caps.iter().enumerate() {
            let width = config.heads_at(cap) * hd;
            let m = config.granularity.width(cap);
            let p = |n: &str| format!("layers.{j}.{n}");
            layers.push(LayerParams {
                ln1_gain: take(&p("ln1.gain"), &[d])?,
                ln1_bias: take(&p("ln1.bias"), &[d])?,
                wq: take(&p("attn.wq"), &[width, d])?,
                wk: take(&p("attn.wk"), &[width, d])?,
                wv: take(&p("attn.wv"), &[width, d])?,
                wo: take(&p("attn.wo"), &[width, d])?,
                ln2_gain: take(&p("ln2.gain"), &[d])?,
                ln2_bias: take(&p("ln2.bias"), &[d])?,
                w1: take(&p("ffn.w1"), &[m, d])?,
                w2: take(&p("ffn.w2"), &[m, d])?,
            });
        }
        let final_gain = take("final_ln.gain", &[d])?;
        let final_bias = take("final_ln.bias", &[d])?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(Self { config, layer_caps, token_embedding, position_embedding, layers, final_gain, final_bias })
    }

    /// Standalone deep copy holding only the rows `config` uses.
    pub fn extract_submodel(&self, config: &LayerConfig) -> Result<Self> {
        self.check_config(config)?;
        let hd = self.config.head_dim();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (layer, &gran) in self.layers.iter().zip(config.iter()) {
            let width = self.config.heads_at(gran) * hd;
            let m = self.config.granularity.width(gran);
            let slice = |t: &Tensor, k: usize| t.row_slice(k).map(|s| s.to_owned_tensor());
            layers.push(LayerParams {
                ln1_gain: layer.ln1_gain.to_owned_tensor(),
                ln1_bias: layer.ln1_bias.to_owned_tensor(),
                wq: slice(&layer.wq, width)?,
                wk: slice(&layer.wk, width)?,
                wv: slice(&layer.wv, width)?,
                wo: slice(&layer.wo, width)?,
                ln2_gain: layer.ln2_gain.to_owned_tensor(),
                ln2_bias: layer.ln2_bias.to_owned_tensor(),
                w1: slice(&layer.w1, m)?,
                w2: slice(&layer.w2, m)?,
            });
        }
        Ok(Self {
            config: self.config.clone(),
            layer_caps: config.clone(),
            token_embedding: self.token_embedding.to_owned_tensor(),
            position_embedding: self.position_embedding.to_owned_tensor(),
            layers,
            final_gain: self.final_gain.to_owned_tensor(),
            final_bias: self.final_bias.to_owned_tensor(),
        })
    }

    pub fn param_count(&self, config: &LayerConfig, include_embeddings: bool) -> u64 {
        param_count(&self.config, config, include_embeddings)
    }

    pub fn flops_per_token(&self, config: &LayerConfig, phase: Phase) -> u64 {
        flops_per_token(&self.config, config, phase)
    }

    /// Elements actually stored, summed tensor by tensor.
    pub fn stored_params(&self, include_embeddings: bool) -> u64 {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| include_embeddings || !n.ends_with("_embedding"))
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }
}
