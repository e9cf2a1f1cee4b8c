//! Parameter and FLOP counts of (Mix'n'Match) submodels.
//!
//! FLOPs follow the usual `2 x params` multiply-accumulate convention per
//! token for every matmul, including the tied output projection. Attention
//! score FLOPs, which depend on context length, are not counted.

use serde::{Deserialize, Serialize};

use super::config::{LayerConfig, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub attention: u64,
    pub mlp: u64,
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.attention + self.mlp + self.head
    }
}

pub fn attention_params(model: &ModelConfig, gran: usize) -> u64 {
    let width = (model.heads_at(gran) * model.head_dim()) as u64;
    4 * width * model.d_model as u64
}

pub fn ffn_params(model: &ModelConfig, gran: usize) -> u64 {
    2 * model.granularity.width(gran) as u64 * model.d_model as u64
}

pub fn param_count(model: &ModelConfig, config: &LayerConfig, include_embeddings: bool) -> u64 {
    let d = model.d_model as u64;
    let per_layer: u64 = config
        .iter()
        .map(|&gran| attention_params(model, gran) + ffn_params(model, gran) + 4 * d)
        .sum();
    let mut total = per_layer + 2 * d;
    if include_embeddings {
        total += (model.vocab_size + model.context_len) as u64 * d;
    }
    total
}

pub fn flops_breakdown(model: &ModelConfig, config: &LayerConfig, phase: Phase) -> FlopsBreakdown {
    let mult = match phase {
        Phase::Infer => 2,
        Phase::Train => 6,
    };
    let attention = config.iter().map(|&g| attention_params(model, g)).sum::<u64>() * mult;
    let mlp = config.iter().map(|&g| ffn_params(model, g)).sum::<u64>() * mult;
    let head = (model.vocab_size * model.d_model) as u64 * mult;
    FlopsBreakdown { attention, mlp, head }
}

pub fn flops_per_token(model: &ModelConfig, config: &LayerConfig, phase: Phase) -> u64 {
    flops_breakdown(model, config, phase).total()
}
