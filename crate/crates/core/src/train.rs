//! Training loops for MatFormer and the three baseline strategies.

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{eval_windows, Corpus};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::model::{BoundParams, LayerConfig, MatDecoderModel, ModelConfig};
use crate::optim::{adam_step, AdamConfig, AdamState, LrSchedule};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Matformer,
    Dynabert,
    Ofa,
    Independent,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Matformer => "matformer",
            Self::Dynabert => "dynabert",
            Self::Ofa => "ofa",
            Self::Independent => "independent",
        }
    }
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingStrategy {
    pub kind: StrategyKind,
    /// Per-granularity sampling probabilities (matformer only); uniform when absent.
    #[serde(default)]
    pub sampling_probs: Option<Vec<f64>>,
    /// Optimizer updates.
    pub steps: usize,
    /// Tokens per batch; a multiple of `seq_len`.
    pub batch_tokens: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm clip; non-positive disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainingStrategy {
    pub fn new(kind: StrategyKind, steps: usize, batch_tokens: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            kind,
            sampling_probs: None,
            steps,
            batch_tokens,
            seq_len,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            seed,
        }
    }

    /// Strategy of `kind` whose total token use matches `matformer_steps`
    /// MatFormer steps: dynabert runs `steps/g` updates of `g` batches and
    /// each independent baseline runs `steps/g` updates.
    pub fn budget_matched(&self, kind: StrategyKind, g: usize) -> Self {
        let steps = match kind {
            StrategyKind::Matformer | StrategyKind::Ofa => self.steps,
            StrategyKind::Dynabert | StrategyKind::Independent => self.steps / g.max(1),
        };
        Self { kind, steps, sampling_probs: None, ..self.clone() }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_tokens / self.seq_len.max(1)
    }

    /// Total training tokens consumed across every model this strategy trains.
    pub fn total_tokens(&self, g: usize) -> u64 {
        let per_step = match self.kind {
            StrategyKind::Dynabert => g * self.batch_tokens,
            _ => self.batch_tokens,
        };
        let models = if self.kind == StrategyKind::Independent { g } else { 1 };
        (self.steps * per_step * models) as u64
    }

    pub fn validate(&self, g: usize) -> Result<()> {
        if self.seq_len == 0 || self.batch_tokens == 0 || self.batch_tokens % self.seq_len != 0 {
            return Err(Error::Config(format!(
                "batch_tokens {} must be a positive multiple of seq_len {}",
                self.batch_tokens, self.seq_len
            )));
        }
        if let Some(p) = &self.sampling_probs {
            if p.len() != g {
                return Err(Error::Config(format!("{} sampling probabilities for {g} granularities", p.len())));
            }
            if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::Config("sampling probabilities must be nonnegative".into()));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("sampling probabilities sum to {sum}, not 1")));
            }
        }
        Ok(())
    }

    pub fn probs(&self, g: usize) -> Vec<f64> {
        self.sampling_probs.clone().unwrap_or_else(|| vec![1.0 / g as f64; g])
    }

    fn require(&self, kind: StrategyKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("strategy is {}, expected {}", self.kind.name(), kind.name())));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub strategy: StrategyKind,
    /// 1-based granularity for uniform steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<usize>,
    /// Per-layer configuration for OFA steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<LayerConfig>,
    /// Baseline index for independent runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<usize>,
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn extend(&mut self, other: TrainingLog) {
        self.records.extend(other.records);
    }
}

/// Owns a model, optional extra parameters and their Adam state.
pub struct Trainer {
    pub model: MatDecoderModel,
    pub extra: Vec<Tensor>,
    states: Vec<AdamState>,
    step: usize,
    adam: AdamConfig,
    lr: LrSchedule,
    clip: f64,
}

impl Trainer {
    pub fn new(model: MatDecoderModel, extra: Vec<Tensor>, strategy: &TrainingStrategy) -> Self {
        let states = model.tensors().into_iter().chain(extra.iter()).map(|t| AdamState::new(t.numel())).collect();
        Self { model, extra, states, step: 0, adam: strategy.adam, lr: strategy.lr, clip: strategy.grad_clip }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Builds the loss with `f`, backpropagates and applies one update.
    /// Returns `(loss, lr)`.
    pub fn step<F>(&mut self, f: F) -> Result<(f64, f64)>
    where
        F: FnOnce(&mut Graph, &MatDecoderModel, &BoundParams, &[Var]) -> Result<Var>,
    {
        let (loss, mut gs) = {
            let mut graph = Graph::new();
            let bound = self.model.bind(&mut graph);
            let extra: Vec<Var> = self.extra.iter().map(|t| graph.param(t)).collect();
            let loss = f(&mut graph, &self.model, &bound, &extra)?;
            let value = graph.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at step {}", self.step + 1)));
            }
            let mut g = graph.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = bound.vars().iter().chain(extra.iter()).map(|&v| g.take(v)).collect();
            (value, grads)
        };
        if self.clip > 0.0 {
            let norm = gs.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
            if norm > self.clip {
                let s = self.clip / norm;
                gs.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
            }
        }
        self.step += 1;
        let lr = self.lr.at(self.step);
        let params = self.model.tensors_mut().into_iter().chain(self.extra.iter_mut());
        for ((p, g), st) in params.zip(gs.iter()).zip(self.states.iter_mut()) {
            if let Some(g) = g {
                adam_step(p.data_mut(), g, st, &self.adam, lr, self.step);
            }
        }
        Ok((loss, lr))
    }
}

/// Draws a 0-based granularity from `probs`.
pub fn sample_granularity<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> Result<usize> {
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Config(format!("sampling probabilities: {e}")))?;
    Ok(dist.sample(rng))
}

/// Independent uniform granularity per layer.
pub fn sample_ofa_config<R: Rng + ?Sized>(rng: &mut R, g: usize, n_layers: usize) -> LayerConfig {
    LayerConfig::new((0..n_layers).map(|_| rng.gen_range(0..g)).collect())
}

/// Mean of the LM losses of granularity `i` on batch `i`, as one graph node.
pub fn dynabert_loss(
    graph: &mut Graph,
    model: &MatDecoderModel,
    bound: &BoundParams,
    batches: &[(Vec<usize>, Vec<usize>)],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let l = model.config().n_layers;
    let mut total: Option<Var> = None;
    for (i, (x, y)) in batches.iter().enumerate() {
        let loss = model.graph_lm_loss(graph, bound, x, y, batch, seq, &LayerConfig::uniform(i, l))?;
        total = Some(match total {
            None => loss,
            Some(t) => graph.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no granularities to average".into()))?;
    graph.scale(total, 1.0 / batches.len() as f64)
}

fn check_model(model: &MatDecoderModel, strategy: &TrainingStrategy) -> Result<()> {
    strategy.validate(model.config().g())?;
    if !model.is_universal() {
        return Err(Error::Config("training needs a universal model".into()));
    }
    if strategy.seq_len > model.config().context_len {
        return Err(Error::Length(format!(
            "seq_len {} exceeds context {}",
            strategy.seq_len,
            model.config().context_len
        )));
    }
    Ok(())
}

fn check_corpus(model: &MatDecoderModel, corpus: &Corpus) -> Result<()> {
    if corpus.vocab_size() > model.config().vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size(),
            model.config().vocab_size
        )));
    }
    Ok(())
}

/// Called after every optimizer step with the new log record and the
/// updated model.
pub type Observer<'a> = dyn FnMut(&LogRecord, &MatDecoderModel) -> Result<()> + 'a;

/// Trains a universal model with the strategy named by `strategy.kind`,
/// calling `observe` after each step. Independent baselines are separate
/// models; use [`train_independent`] for those.
pub fn train_observed(
    model: &mut MatDecoderModel,
    strategy: &TrainingStrategy,
    corpus: &Corpus,
    observe: &mut Observer<'_>,
) -> Result<TrainingLog> {
    match strategy.kind {
        StrategyKind::Matformer => run_matformer(model, strategy, corpus, observe),
        StrategyKind::Dynabert => run_dynabert(model, strategy, corpus, observe),
        StrategyKind::Ofa => run_ofa(model, strategy, corpus, observe),
        StrategyKind::Independent => {
            Err(Error::Config("independent baselines are trained as separate models".into()))
        }
    }
}

/// Granularity-sampling training: each step trains one uniform submodel.
pub fn train_matformer(model: &mut MatDecoderModel, strategy: &TrainingStrategy, corpus: &Corpus) -> Result<TrainingLog> {
    run_matformer(model, strategy, corpus, &mut |_, _| Ok(()))
}

fn run_matformer(
    model: &mut MatDecoderModel,
    strategy: &TrainingStrategy,
    corpus: &Corpus,
    observe: &mut Observer<'_>,
) -> Result<TrainingLog> {
    strategy.require(StrategyKind::Matformer)?;
    check_model(model, strategy)?;
    check_corpus(model, corpus)?;
    let g = model.config().g();
    let l = model.config().n_layers;
    let probs = strategy.probs(g);
    let mut sampler = rng::substream(strategy.seed, "sampling");
    let mut data = rng::substream(strategy.seed, "data");
    let (b, t) = (strategy.batch_size(), strategy.seq_len);
    let mut trainer = Trainer::new(model.clone(), Vec::new(), strategy);
    let mut log = TrainingLog::default();
    for step in 1..=strategy.steps {
        let i = sample_granularity(&mut sampler, &probs)?;
        let (x, y) = corpus.sample_batch(&mut data, b, t)?;
        let config = LayerConfig::uniform(i, l);
        let (loss, lr) = trainer.step(|gr, m, bound, _| m.graph_lm_loss(gr, bound, &x, &y, b, t, &config))?;
        log.records.push(LogRecord {
            step,
            strategy: StrategyKind::Matformer,
            granularity: Some(i + 1),
            config: None,
            model: None,
            loss,
            lr,
            tokens_seen: (step * strategy.batch_tokens) as u64,
        });
        observe(&log.records[log.records.len() - 1], &trainer.model)?;
    }
    *model = trainer.model;
    Ok(log)
}

/// Joint training: every step averages the losses of all granularities,
/// each on its own batch.
pub fn train_dynabert(model: &mut MatDecoderModel, strategy: &TrainingStrategy, corpus: &Corpus) -> Result<TrainingLog> {
    run_dynabert(model, strategy, corpus, &mut |_, _| Ok(()))
}

fn run_dynabert(
    model: &mut MatDecoderModel,
    strategy: &TrainingStrategy,
    corpus: &Corpus,
    observe: &mut Observer<'_>,
) -> Result<TrainingLog> {
    strategy.require(StrategyKind::Dynabert)?;
    check_model(model, strategy)?;
    check_corpus(model, corpus)?;
    let g = model.config().g();
    let mut data = rng::substream(strategy.seed, "data");
    let (b, t) = (strategy.batch_size(), strategy.seq_len);
    let mut trainer = Trainer::new(model.clone(), Vec::new(), strategy);
    let mut log = TrainingLog::default();
    for step in 1..=strategy.steps {
        let batches = (0..g).map(|_| corpus.sample_batch(&mut data, b, t)).collect::<Result<Vec<_>>>()?;
        let (loss, lr) = trainer.step(|gr, m, bound, _| dynabert_loss(gr, m, bound, &batches, b, t))?;
        log.records.push(LogRecord {
            step,
            strategy: StrategyKind::Dynabert,
            granularity: None,
            config: None,
            model: None,
            loss,
            lr,
            tokens_seen: (step * g * strategy.batch_tokens) as u64,
        });
        observe(&log.records[log.records.len() - 1], &trainer.model)?;
    }
    *model = trainer.model;
    Ok(log)
}

/// Random-subnetwork training: each step draws every layer's granularity
/// independently and uniformly.
pub fn train_ofa(model: &mut MatDecoderModel, strategy: &TrainingStrategy, corpus: &Corpus) -> Result<TrainingLog> {
    run_ofa(model, strategy, corpus, &mut |_, _| Ok(()))
}

fn run_ofa(
    model: &mut MatDecoderModel,
    strategy: &TrainingStrategy,
    corpus: &Corpus,
    observe: &mut Observer<'_>,
) -> Result<TrainingLog> {
    strategy.require(StrategyKind::Ofa)?;
    check_model(model, strategy)?;
    check_corpus(model, corpus)?;
    let g = model.config().g();
    let l = model.config().n_layers;
    let mut sampler = rng::substream(strategy.seed, "sampling");
    let mut data = rng::substream(strategy.seed, "data");
    let (b, t) = (strategy.batch_size(), strategy.seq_len);
    let mut trainer = Trainer::new(model.clone(), Vec::new(), strategy);
    let mut log = TrainingLog::default();
    for step in 1..=strategy.steps {
        let config = sample_ofa_config(&mut sampler, g, l);
        let (x, y) = corpus.sample_batch(&mut data, b, t)?;
        let (loss, lr) = trainer.step(|gr, m, bound, _| m.graph_lm_loss(gr, bound, &x, &y, b, t, &config))?;
        log.records.push(LogRecord {
            step,
            strategy: StrategyKind::Ofa,
            granularity: None,
            config: Some(config),
            model: None,
            loss,
            lr,
            tokens_seen: (step * strategy.batch_tokens) as u64,
        });
        observe(&log.records[log.records.len() - 1], &trainer.model)?;
    }
    *model = trainer.model;
    Ok(log)
}

/// One dense baseline per granularity of `base`, with `d_ff` equal to that
/// granularity's FFN width.
pub fn baseline_configs(base: &ModelConfig) -> Vec<ModelConfig> {
    (0..base.g()).map(|i| base.baseline(base.granularity.width(i))).collect()
}

/// Seed used for baseline `k` of a run seeded with `seed`.
pub fn baseline_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1))
}

/// Trains each config from scratch with its own seed for `strategy.steps`
/// updates.
pub fn train_independent(
    configs: &[ModelConfig],
    strategy: &TrainingStrategy,
    corpus: &Corpus,
) -> Result<Vec<(MatDecoderModel, TrainingLog)>> {
    train_independent_observed(configs, strategy, corpus, &mut |_, _| Ok(()))
}

/// [`train_independent`] with a per-step callback; `record.model` names the
/// baseline being trained (1-based).
pub fn train_independent_observed(
    configs: &[ModelConfig],
    strategy: &TrainingStrategy,
    corpus: &Corpus,
    observe: &mut Observer<'_>,
) -> Result<Vec<(MatDecoderModel, TrainingLog)>> {
    strategy.require(StrategyKind::Independent)?;
    let mut out = Vec::with_capacity(configs.len());
    for (k, config) in configs.iter().enumerate() {
        let seed = baseline_seed(strategy.seed, k);
        let mut model = MatDecoderModel::new(config.clone(), seed)?;
        check_model(&model, strategy)?;
        check_corpus(&model, corpus)?;
        let sub = TrainingStrategy { kind: StrategyKind::Matformer, seed, sampling_probs: None, ..strategy.clone() };
        let relabel = |r: &mut LogRecord| {
            r.strategy = StrategyKind::Independent;
            r.granularity = None;
            r.model = Some(k + 1);
        };
        let mut log = run_matformer(&mut model, &sub, corpus, &mut |r, m| {
            let mut r = r.clone();
            relabel(&mut r);
            observe(&r, m)
        })?;
        log.records.iter_mut().for_each(relabel);
        out.push((model, log));
    }
    Ok(out)
}

/// Mean next-token NLL over `tokens`, in windows of `seq` predictions.
pub fn evaluate_tokens(model: &MatDecoderModel, config: &LayerConfig, tokens: &[usize], seq: usize) -> Result<f64> {
    let windows = eval_windows(tokens, seq);
    if windows.is_empty() {
        return Err(Error::Length("evaluation needs at least two tokens".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in windows {
        let logits = model.forward(x, config)?;
        for (r, &target) in y.iter().enumerate() {
            total += kernels::nll(logits.row(r), target);
        }
        count += y.len();
    }
    Ok(total / count as f64)
}

/// Mean validation NLL (nats per token) of `model` under `config`.
pub fn evaluate_loss(model: &MatDecoderModel, config: &LayerConfig, corpus: &Corpus, seq: usize) -> Result<f64> {
    evaluate_tokens(model, config, &corpus.validation(), seq)
}
