//! Run configs, the metadata stored alongside checkpoints, and `train`.

use std::path::{Path, PathBuf};

use matformer::checkpoint::save_model;
use matformer::data::Corpus;
use matformer::model::Phase;
use matformer::train::{
    baseline_configs, evaluate_tokens, train_independent_observed, train_observed, LogRecord, StrategyKind,
    TrainingLog, TrainingStrategy,
};
use matformer::{Error, LayerConfig, MatDecoderModel, ModelConfig, Result};
use serde::{Deserialize, Serialize};

use crate::output::{read_file, to_json, write_file};
use crate::{par, EvalSource, TrainArgs};

pub const RUN_FILE: &str = "run.json";
pub const MODEL_FILE: &str = "model.matf";
pub const LOG_FILE: &str = "train.log.jsonl";
pub const EVAL_FILE: &str = "eval.json";

fn default_val_fraction() -> f64 {
    0.01
}

fn default_eval_tokens() -> usize {
    4096
}

/// One training run. `seed` drives every random stream (init, data split,
/// batch and granularity sampling); `strategy.seed` is overwritten with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub strategy: TrainingStrategy,
    /// Raw text, tokenized as bytes.
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Evaluate every this many steps (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Validation tokens used for every evaluation.
    #[serde(default = "default_eval_tokens")]
    pub eval_tokens: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path, "run config")?;
        serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, a: &TrainArgs) {
        if let Some(s) = a.seed {
            self.seed = s;
        }
        if let Some(n) = a.steps {
            self.strategy.steps = n;
        }
        if let Some(p) = &a.corpus {
            self.corpus = p.clone();
        }
        if let Some(p) = &a.output_dir {
            self.output_dir = p.clone();
        }
        if let Some(n) = a.eval_every {
            self.eval_every = n;
        }
        if let Some(n) = a.eval_tokens {
            self.eval_tokens = n;
        }
        self.strategy.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.strategy.validate(self.model.g())?;
        if self.strategy.seq_len > self.model.context_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds context_len {}",
                self.strategy.seq_len, self.model.context_len
            )));
        }
        if self.eval_tokens < 2 {
            return Err(Error::Config("eval_tokens must be at least 2".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn meta(&self) -> RunMeta {
        RunMeta {
            corpus: self.corpus.clone(),
            val_fraction: self.val_fraction,
            split_seed: self.seed,
            eval_tokens: self.eval_tokens,
            seq_len: self.strategy.seq_len,
            strategy: self.strategy.kind,
        }
    }
}

/// Stored in each checkpoint's extras so later commands can find the
/// validation data the model was evaluated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub corpus: PathBuf,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub eval_tokens: usize,
    pub seq_len: usize,
    pub strategy: StrategyKind,
}

impl RunMeta {
    pub fn from_extras(extras: &serde_json::Value) -> Option<Self> {
        serde_json::from_value(extras.get("run")?.clone()).ok()
    }

    pub fn extras(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({ "run": serde_json::to_value(self)? }))
    }
}

/// Validation tokens and evaluation window length.
pub struct EvalData {
    pub tokens: Vec<usize>,
    pub seq: usize,
}

impl EvalData {
    pub fn load(corpus: &Path, val_fraction: f64, split_seed: u64, eval_tokens: usize, seq: usize) -> Result<Self> {
        if !corpus.exists() {
            return Err(Error::Config(format!("corpus {} not found", corpus.display())));
        }
        let c = Corpus::from_file(corpus, val_fraction, split_seed)?;
        Ok(Self::from_corpus(&c, eval_tokens, seq))
    }

    pub fn from_corpus(corpus: &Corpus, eval_tokens: usize, seq: usize) -> Self {
        let mut tokens = corpus.validation();
        tokens.truncate(eval_tokens);
        Self { tokens, seq }
    }

    /// Flags override whatever the checkpoint recorded; `None` when there is
    /// no corpus to evaluate on.
    pub fn resolve(meta: Option<&RunMeta>, src: &EvalSource) -> Result<Option<Self>> {
        let corpus = src.corpus.clone().or_else(|| meta.map(|m| m.corpus.clone()));
        let Some(corpus) = corpus else { return Ok(None) };
        let pick = |flag: Option<f64>, stored: Option<f64>, default: f64| flag.or(stored).unwrap_or(default);
        let val_fraction = pick(src.val_fraction, meta.map(|m| m.val_fraction), default_val_fraction());
        let split_seed = src.split_seed.or(meta.map(|m| m.split_seed)).unwrap_or(0);
        let eval_tokens = src.eval_tokens.or(meta.map(|m| m.eval_tokens)).unwrap_or(default_eval_tokens());
        let seq = src.seq_len.or(meta.map(|m| m.seq_len));
        let Some(seq) = seq else {
            return Err(Error::Config("--seq-len is required when the checkpoint records no run".into()));
        };
        Self::load(&corpus, val_fraction, split_seed, eval_tokens, seq).map(Some)
    }

    pub fn loss(&self, model: &MatDecoderModel, config: &LayerConfig) -> Result<f64> {
        evaluate_tokens(model, config, &self.tokens, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// 1-based granularity, or baseline index for independent runs.
    pub granularity: usize,
    pub checkpoint: String,
    pub config: LayerConfig,
    pub params: u64,
    pub flops_per_token: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub granularity: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub eval_tokens: usize,
    #[serde(rename = "final")]
    pub final_rows: Vec<EvalRow>,
    pub history: Vec<HistoryRow>,
}

pub fn baseline_file(k: usize) -> String {
    format!("baseline-{k}.matf")
}

/// Rows for every uniform granularity of a universal model.
pub fn eval_universal(model: &MatDecoderModel, data: &EvalData) -> Result<Vec<EvalRow>> {
    let g = model.config().g();
    let configs: Vec<LayerConfig> = (0..g).map(|i| model.config().uniform(i)).collect();
    let losses = par::map(&configs, |c| data.loss(model, c))?;
    Ok(configs
        .into_iter()
        .zip(losses)
        .enumerate()
        .map(|(i, (config, loss))| EvalRow {
            granularity: i + 1,
            checkpoint: MODEL_FILE.into(),
            params: model.param_count(&config, false),
            flops_per_token: model.flops_per_token(&config, Phase::Infer),
            config,
            loss,
        })
        .collect())
}

pub fn eval_baseline(k: usize, model: &MatDecoderModel, data: &EvalData) -> Result<EvalRow> {
    let config = model.full_config();
    Ok(EvalRow {
        granularity: k,
        checkpoint: baseline_file(k),
        params: model.param_count(&config, false),
        flops_per_token: model.flops_per_token(&config, Phase::Infer),
        loss: data.loss(model, &config)?,
        config,
    })
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply(a);
    cfg.validate()?;
    if !cfg.corpus.exists() {
        return Err(Error::Config(format!("corpus {} not found", cfg.corpus.display())));
    }
    let corpus = Corpus::from_file(&cfg.corpus, cfg.val_fraction, cfg.seed)?;
    let data = EvalData::from_corpus(&corpus, cfg.eval_tokens, cfg.strategy.seq_len);
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    let extras = cfg.meta().extras()?;
    let every = cfg.eval_every;
    let mut history = Vec::new();

    let (log, final_rows) = if cfg.strategy.kind == StrategyKind::Independent {
        let configs = baseline_configs(&cfg.model);
        let mut observe = |r: &LogRecord, m: &MatDecoderModel| {
            if every > 0 && r.step % every == 0 {
                let k = r.model.unwrap_or(0);
                history.push(HistoryRow { step: r.step, granularity: k, loss: data.loss(m, &m.full_config())? });
            }
            Ok(())
        };
        let trained = train_independent_observed(&configs, &cfg.strategy, &corpus, &mut observe)?;
        let mut log = TrainingLog::default();
        let mut rows = Vec::new();
        for (k, (model, l)) in trained.into_iter().enumerate() {
            save_model(&dir.join(baseline_file(k + 1)), &model, &extras)?;
            rows.push(eval_baseline(k + 1, &model, &data)?);
            log.extend(l);
        }
        (log, rows)
    } else {
        let mut model = MatDecoderModel::new(cfg.model.clone(), cfg.seed)?;
        let mut observe = |r: &LogRecord, m: &MatDecoderModel| {
            if every > 0 && r.step % every == 0 {
                for row in eval_universal(m, &data)? {
                    history.push(HistoryRow { step: r.step, granularity: row.granularity, loss: row.loss });
                }
            }
            Ok(())
        };
        let log = train_observed(&mut model, &cfg.strategy, &corpus, &mut observe)?;
        save_model(&dir.join(MODEL_FILE), &model, &extras)?;
        (log, eval_universal(&model, &data)?)
    };

    let mut buf = Vec::new();
    log.write_jsonl(&mut buf)?;
    write_file(&dir.join(LOG_FILE), &buf)?;
    write_file(&dir.join(RUN_FILE), to_json(&cfg)?.as_bytes())?;
    let summary = EvalSummary {
        strategy: cfg.strategy.kind,
        seed: cfg.seed,
        eval_tokens: data.tokens.len(),
        final_rows,
        history,
    };
    write_file(&dir.join(EVAL_FILE), to_json(&summary)?.as_bytes())?;
    for row in &summary.final_rows {
        println!("granularity {} params {} loss {:.4}", row.granularity, row.params, row.loss);
    }
    Ok(())
}
