//! Autoregressive and speculative decoding, and submodel consistency metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::data::eval_windows;
use crate::error::{Error, Result};
use crate::model::{LayerConfig, MatDecoderModel, Phase};
use crate::rng;
use crate::tensor::Tensor;

/// A model together with the per-layer granularities to run it at.
#[derive(Debug, Clone, Copy)]
pub struct Submodel<'a> {
    pub model: &'a MatDecoderModel,
    pub config: &'a LayerConfig,
}

impl<'a> Submodel<'a> {
    pub fn new(model: &'a MatDecoderModel, config: &'a LayerConfig) -> Result<Self> {
        model.check_config(config)?;
        Ok(Self { model, config })
    }

    fn forward_cached(&self, tokens: &[usize], cache: &mut KvCache) -> Result<Tensor> {
        self.model.forward_cached(tokens, self.config, cache)
    }

    fn flops_per_token(&self) -> u64 {
        self.model.flops_per_token(self.config, Phase::Infer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sample,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_lookahead() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    #[serde(default)]
    pub mode: DecodeMode,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    /// Draft granularities; smallest uniform config when absent.
    #[serde(default)]
    pub draft_config: Option<LayerConfig>,
    /// Verifier granularities; the full model when absent.
    #[serde(default)]
    pub verifier_config: Option<LayerConfig>,
    /// Draft tokens proposed per round.
    #[serde(default = "default_lookahead")]
    pub lookahead: usize,
    /// Draft and verifier write into one cache; the verifier overwrites
    /// every position it scores.
    #[serde(default)]
    pub shared_cache: bool,
}

impl DecodeParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_tokens,
            seed: 0,
            draft_config: None,
            verifier_config: None,
            lookahead: 4,
            shared_cache: false,
        }
    }

    pub fn sample(max_tokens: usize, temperature: f64, seed: u64) -> Self {
        Self { mode: DecodeMode::Sample, temperature, seed, ..Self::greedy(max_tokens) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == DecodeMode::Sample && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.lookahead == 0 {
            return Err(Error::Config("lookahead must be at least 1".into()));
        }
        Ok(())
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `softmax(row / temperature)`.
pub fn probabilities(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn choose<R: Rng + ?Sized>(row: &[f64], params: &DecodeParams, rng: &mut R) -> usize {
    match params.mode {
        DecodeMode::Greedy => argmax(row),
        DecodeMode::Sample => sample_categorical(&probabilities(row, params.temperature), rng),
    }
}

fn last_row(t: &Tensor) -> &[f64] {
    t.row(t.rows() - 1)
}

fn check_prompt(model: &MatDecoderModel, prompt: &[usize], max_tokens: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Length("prompt must hold at least one token".into()));
    }
    let ctx = model.config().context_len;
    if prompt.len() + max_tokens > ctx {
        return Err(Error::Length(format!(
            "prompt of {} plus {max_tokens} new tokens exceeds context {ctx}",
            prompt.len()
        )));
    }
    Ok(())
}

/// Generates `params.max_tokens` tokens after `prompt` with a KV cache.
/// Returns only the generated tokens.
pub fn decode(model: &MatDecoderModel, config: &LayerConfig, prompt: &[usize], params: &DecodeParams) -> Result<Vec<usize>> {
    params.validate()?;
    model.check_config(config)?;
    check_prompt(model, prompt, params.max_tokens)?;
    let mut rng = rng::substream(params.seed, "decode");
    let mut cache = KvCache::new(model.config().n_layers);
    let mut out = Vec::with_capacity(params.max_tokens);
    if params.max_tokens == 0 {
        return Ok(out);
    }
    let mut logits = model.forward_cached(prompt, config, &mut cache)?;
    loop {
        let t = choose(last_row(&logits), params, &mut rng);
        out.push(t);
        if out.len() == params.max_tokens {
            return Ok(out);
        }
        logits = model.forward_cached(&[t], config, &mut cache)?;
    }
}

/// Same as [`decode`] but recomputes the whole prefix for every token.
pub fn decode_uncached(
    model: &MatDecoderModel,
    config: &LayerConfig,
    prompt: &[usize],
    params: &DecodeParams,
) -> Result<Vec<usize>> {
    params.validate()?;
    model.check_config(config)?;
    check_prompt(model, prompt, params.max_tokens)?;
    let mut rng = rng::substream(params.seed, "decode");
    let mut seq = prompt.to_vec();
    for _ in 0..params.max_tokens {
        let logits = model.forward(&seq, config)?;
        seq.push(choose(last_row(&logits), params, &mut rng));
    }
    Ok(seq.split_off(prompt.len()))
}

/// Counters from one speculative decoding run. FLOPs count one forward
/// pass as one token-equivalent of its submodel, so a verifier pass over
/// `K + 1` positions costs the same as a single decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecStats {
    /// Accepted over proposed draft tokens (1.0 when nothing was proposed).
    pub accept_rate: f64,
    pub tokens: usize,
    pub rounds: usize,
    pub draft_flops: u64,
    pub verifier_flops: u64,
    /// `(draft_flops + verifier_flops)` over the cost of one verifier pass
    /// per generated token.
    pub flops_vs_verifier_only: f64,
    /// Positions scored by the verifier across all rounds.
    pub verifier_positions: usize,
    pub proposed: usize,
    pub accepted: usize,
}

/// Speculative decoding with nested submodels of one model, configured by
/// `params.draft_config` and `params.verifier_config`.
pub fn speculative_decode(model: &MatDecoderModel, prompt: &[usize], params: &DecodeParams) -> Result<(Vec<usize>, SpecStats)> {
    let l = model.config().n_layers;
    let draft = params.draft_config.clone().unwrap_or_else(|| LayerConfig::uniform(0, l));
    let verifier = params.verifier_config.clone().unwrap_or_else(|| model.full_config());
    if !draft.nested_in(&verifier) {
        return Err(Error::Config(format!("draft {draft} is not nested in verifier {verifier}")));
    }
    speculative_decode_with(Submodel::new(model, &draft)?, Submodel::new(model, &verifier)?, prompt, params)
}

/// Speculative decoding with an arbitrary draft; the output follows the
/// verifier exactly (greedy) or in distribution (sampling).
pub fn speculative_decode_with(
    draft: Submodel<'_>,
    verifier: Submodel<'_>,
    prompt: &[usize],
    params: &DecodeParams,
) -> Result<(Vec<usize>, SpecStats)> {
    params.validate()?;
    check_prompt(verifier.model, prompt, params.max_tokens)?;
    let (dm, vm) = (draft.model.config(), verifier.model.config());
    if dm.vocab_size != vm.vocab_size {
        return Err(Error::Config(format!("draft vocabulary {} differs from verifier {}", dm.vocab_size, vm.vocab_size)));
    }
    if dm.context_len < prompt.len() + params.max_tokens {
        return Err(Error::Length(format!("draft context {} too short", dm.context_len)));
    }
    if params.shared_cache {
        if !std::ptr::eq(draft.model, verifier.model) {
            return Err(Error::Cache("a shared cache needs draft and verifier from one model".into()));
        }
        if vm.granularity.heads_nested() {
            return Err(Error::Cache("a shared cache needs identical attention widths at every granularity".into()));
        }
    }

    let mut rng = rng::substream(params.seed, "decode");
    let mut verifier_cache = KvCache::new(vm.n_layers);
    let mut draft_cache = KvCache::new(dm.n_layers);
    let mut seq = prompt.to_vec();
    let (mut rounds, mut draft_passes, mut positions, mut proposed, mut accepted) = (0, 0, 0, 0, 0);

    while seq.len() - prompt.len() < params.max_tokens {
        let remaining = params.max_tokens - (seq.len() - prompt.len());
        let k = params.lookahead.min(remaining - 1);
        rounds += 1;

        let mut drafts = Vec::with_capacity(k);
        let mut draft_probs = Vec::with_capacity(k);
        let base = verifier_cache.len();
        if k > 0 {
            let cache = if params.shared_cache { &mut verifier_cache } else { &mut draft_cache };
            let mut feed = seq[cache.len()..].to_vec();
            for _ in 0..k {
                let logits = draft.forward_cached(&feed, cache)?;
                draft_passes += 1;
                let row = last_row(&logits);
                let t = match params.mode {
                    DecodeMode::Greedy => argmax(row),
                    DecodeMode::Sample => {
                        let q = probabilities(row, params.temperature);
                        let t = sample_categorical(&q, &mut rng);
                        draft_probs.push(q);
                        t
                    }
                };
                drafts.push(t);
                feed = vec![t];
            }
            if params.shared_cache {
                verifier_cache.truncate(base);
            }
        }

        let mut feed = seq[verifier_cache.len()..].to_vec();
        feed.extend_from_slice(&drafts);
        let logits = verifier.forward_cached(&feed, &mut verifier_cache)?;
        positions += feed.len();
        let first = feed.len() - 1 - k;
        let row = |j: usize| logits.row(first + j);

        let mut emitted = Vec::with_capacity(k + 1);
        let a = match params.mode {
            DecodeMode::Greedy => {
                let mut a = 0;
                while a < k && drafts[a] == argmax(row(a)) {
                    a += 1;
                }
                emitted.extend_from_slice(&drafts[..a]);
                emitted.push(argmax(row(a)));
                a
            }
            DecodeMode::Sample => {
                let mut rejected = false;
                for j in 0..k {
                    let p = probabilities(row(j), params.temperature);
                    let q = &draft_probs[j];
                    let x = drafts[j];
                    let u: f64 = rng.gen();
                    if u < (p[x] / q[x]).min(1.0) {
                        emitted.push(x);
                        continue;
                    }
                    let mut residual: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
                    let sum: f64 = residual.iter().sum();
                    let t = if sum > 0.0 {
                        residual.iter_mut().for_each(|v| *v /= sum);
                        sample_categorical(&residual, &mut rng)
                    } else {
                        sample_categorical(&p, &mut rng)
                    };
                    emitted.push(t);
                    rejected = true;
                    break;
                }
                if !rejected {
                    emitted.push(sample_categorical(&probabilities(row(k), params.temperature), &mut rng));
                }
                emitted.len() - 1
            }
        };
        proposed += k;
        accepted += a;
        seq.extend_from_slice(&emitted);

        let committed = seq.len() - 1;
        verifier_cache.truncate(verifier_cache.len().min(committed));
        draft_cache.truncate(draft_cache.len().min(committed));
    }

    let tokens = seq.len() - prompt.len();
    let draft_flops = draft_passes as u64 * draft.flops_per_token();
    let verifier_fpt = verifier.flops_per_token();
    let verifier_flops = rounds as u64 * verifier_fpt;
    let baseline = tokens as u64 * verifier_fpt;
    let stats = SpecStats {
        accept_rate: if proposed == 0 { 1.0 } else { accepted as f64 / proposed as f64 },
        tokens,
        rounds,
        draft_flops,
        verifier_flops,
        flops_vs_verifier_only: if baseline == 0 { 0.0 } else { (draft_flops + verifier_flops) as f64 / baseline as f64 },
        verifier_positions: positions,
        proposed,
        accepted,
    };
    Ok((seq.split_off(prompt.len()), stats))
}

fn check_vocab(a: &Submodel<'_>, b: &Submodel<'_>) -> Result<()> {
    let (va, vb) = (a.model.config().vocab_size, b.model.config().vocab_size);
    if va != vb {
        return Err(Error::Config(format!("vocabularies differ: {va} vs {vb}")));
    }
    Ok(())
}

/// Percentage of positions where `a` and `b` produce the same greedy token
/// over `horizon` steps after each prefix. Both decode independently unless
/// `teacher_forced`, in which case `a` predicts along `b`'s continuation.
pub fn consistency_token_match(
    a: Submodel<'_>,
    b: Submodel<'_>,
    prefixes: &[Vec<usize>],
    horizon: usize,
    teacher_forced: bool,
) -> Result<f64> {
    check_vocab(&a, &b)?;
    if prefixes.is_empty() || horizon == 0 {
        return Err(Error::Length("consistency needs prefixes and a positive horizon".into()));
    }
    let params = DecodeParams::greedy(horizon);
    let mut matches = 0usize;
    for prefix in prefixes {
        let yb = decode(b.model, b.config, prefix, &params)?;
        let ya = if teacher_forced {
            let mut seq = prefix.clone();
            seq.extend_from_slice(&yb[..horizon - 1]);
            let logits = a.model.forward(&seq, a.config)?;
            (prefix.len() - 1..seq.len()).map(|r| argmax(logits.row(r))).collect()
        } else {
            decode(a.model, a.config, prefix, &params)?
        };
        matches += ya.iter().zip(&yb).filter(|(x, y)| x == y).count();
    }
    Ok(100.0 * matches as f64 / (prefixes.len() * horizon) as f64)
}

/// `sum p log(p / q)` over the vocabulary, from two logit rows.
pub fn kl_from_logits(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let p = probabilities(p_logits, 1.0);
    let lse_p = crate::kernels::log_sum_exp(p_logits);
    let lse_q = crate::kernels::log_sum_exp(q_logits);
    let kl: f64 = p
        .iter()
        .zip(p_logits.iter().zip(q_logits))
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, (&lp, &lq))| pi * ((lp - lse_p) - (lq - lse_q)))
        .sum();
    kl.max(0.0)
}

/// Mean per-position `KL(P_small || P_large)` on teacher-forced `tokens`,
/// in windows of `seq`; `reverse` swaps the direction.
pub fn consistency_kl(small: Submodel<'_>, large: Submodel<'_>, tokens: &[usize], seq: usize, reverse: bool) -> Result<f64> {
    check_vocab(&small, &large)?;
    let windows = eval_windows(tokens, seq);
    if windows.is_empty() {
        return Err(Error::Length("KL needs at least two tokens".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, _) in windows {
        let ls = small.model.forward(x, small.config)?;
        let ll = large.model.forward(x, large.config)?;
        for r in 0..x.len() {
            total += if reverse { kl_from_logits(ll.row(r), ls.row(r)) } else { kl_from_logits(ls.row(r), ll.row(r)) };
        }
        count += x.len();
    }
    Ok(total / count as f64)
}
