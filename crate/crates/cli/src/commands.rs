use std::path::Path;

use matformer::checkpoint::{load_model, save_model};
use matformer::data::{decode_bytes, encode_bytes, synthetic_text};
use matformer::inference::{consistency_kl, consistency_token_match, speculative_decode, DecodeParams, SpecStats, Submodel};
use matformer::model::{all_configs, mix_n_match_count, Phase};
use matformer::retrieval::{adaptive_retrieval_experiment, synthetic_clusters, train_encoder, ClusterSpec, EmbeddingIndex};
use matformer::rng::substream;
use matformer::scaling::{fit_power_law, ScalingPoint};
use matformer::search::{
    evolutionary_search, fit_predictor, heuristic_select, least_slope_candidates, mark_frontier, pareto_sweep, Budget,
    EvolutionParams, PredictorDataset, MIN_PREDICTOR_PAIRS, SearchResult, SweepPoint,
};
use matformer::train::{baseline_configs, baseline_seed, sample_ofa_config, StrategyKind, TrainingLog, TrainingStrategy};
use matformer::{Error, LayerConfig, MatDecoderModel, ModelConfig, Result};
use serde::Serialize;

use crate::output::{emit, read_file, write_csv, write_file};
use crate::run::{baseline_file, EvalData, RunConfig, RunMeta, LOG_FILE, MODEL_FILE, RUN_FILE};
use crate::{par, ConsistencyArgs, ExtractArgs, GenCorpusArgs, Method, ReportArgs, RetrieveArgs, ScalingFitArgs, SearchArgs, SpecdecodeArgs};

/// Largest g^l the exhaustive search will enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 65_536;

fn load(path: &Path) -> Result<(MatDecoderModel, serde_json::Value)> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    load_model(path)
}

fn parse_config(model: &MatDecoderModel, s: &str) -> Result<LayerConfig> {
    let config: LayerConfig = s.parse()?;
    model.check_config(&config)?;
    Ok(config)
}

#[derive(Serialize)]
struct ExtractReport {
    config: LayerConfig,
    params: u64,
    params_with_embeddings: u64,
    flops_per_token: u64,
}

pub fn extract(a: &ExtractArgs) -> Result<()> {
    let (model, extras) = load(&a.checkpoint)?;
    let config = parse_config(&model, &a.config)?;
    let sub = model.extract_submodel(&config)?;
    save_model(&a.out, &sub, &extras)?;
    let report = ExtractReport {
        params: model.param_count(&config, false),
        params_with_embeddings: model.param_count(&config, true),
        flops_per_token: model.flops_per_token(&config, Phase::Infer),
        config,
    };
    emit(&report, None)
}

fn require_universal(model: &MatDecoderModel) -> Result<()> {
    if !model.is_universal() {
        return Err(Error::Config("search needs a universal checkpoint, not an extracted submodel".into()));
    }
    Ok(())
}

fn measure_all(model: &MatDecoderModel, data: &EvalData, configs: &[LayerConfig]) -> Result<Vec<f64>> {
    par::map(configs, |c| data.loss(model, c))
}

/// Distinct configs for fitting the loss predictor: every uniform config,
/// then random Mix'n'Match draws.
fn predictor_configs(cfg: &ModelConfig, samples: usize, seed: u64) -> Vec<LayerConfig> {
    let (g, l) = (cfg.g(), cfg.n_layers);
    let total = mix_n_match_count(g, l).unwrap_or(u128::MAX);
    let want = (samples as u128).min(total) as usize;
    let mut out: Vec<LayerConfig> = (0..g).map(|i| cfg.uniform(i)).take(want).collect();
    let mut rng = substream(seed, "predictor-sample");
    let mut attempts = 0;
    while out.len() < want && attempts < want * 100 {
        let c = sample_ofa_config(&mut rng, g, l);
        if !out.contains(&c) {
            out.push(c);
        }
        attempts += 1;
    }
    out
}

pub fn search(a: &SearchArgs) -> Result<()> {
    let (model, extras) = load(&a.checkpoint)?;
    require_universal(&model)?;
    let cfg = model.config().clone();
    let budget = Budget { metric: a.metric.into(), limit: a.budget };
    budget.check_feasible(&cfg)?;
    if matches!(a.method, Method::Exhaustive) {
        let count = mix_n_match_count(cfg.g(), cfg.n_layers);
        if count.map_or(true, |n| n > EXHAUSTIVE_LIMIT) {
            return Err(Error::Budget(format!(
                "exhaustive search is limited to g^l <= {EXHAUSTIVE_LIMIT}; this model has g={} and l={}",
                cfg.g(),
                cfg.n_layers
            )));
        }
    }
    let meta = RunMeta::from_extras(&extras);
    let data = EvalData::resolve(meta.as_ref(), &a.source)?;
    let need_data = || data.as_ref().ok_or_else(|| Error::Config("this method needs --corpus to measure losses".into()));
    let result = match a.method {
        Method::Heuristic => {
            let config = heuristic_select(&budget, &cfg)?;
            let measured = data.as_ref().map(|d| d.loss(&model, &config)).transpose()?;
            SearchResult { budget, config, predicted_loss: None, measured_loss: measured, method: "heuristic".into() }
        }
        Method::Nas => {
            let data = need_data()?;
            let configs = predictor_configs(&cfg, a.samples, a.seed);
            if configs.len() < MIN_PREDICTOR_PAIRS {
                return Err(Error::Config(format!(
                    "nas needs at least {MIN_PREDICTOR_PAIRS} distinct measured configs, got {}",
                    configs.len()
                )));
            }
            let losses = measure_all(&model, data, &configs)?;
            let dataset = PredictorDataset::from_pairs(configs.into_iter().zip(losses))?;
            let predictor = fit_predictor(&dataset, &cfg, a.seed)?;
            let params = EvolutionParams { seed: a.seed, ..EvolutionParams::default() };
            let (config, predicted) = evolutionary_search(&predictor, &budget, &cfg, &params)?;
            let measured = data.loss(&model, &config)?;
            SearchResult { budget, config, predicted_loss: Some(predicted), measured_loss: Some(measured), method: "nas".into() }
        }
        Method::Exhaustive => {
            let data = need_data()?;
            let configs: Vec<LayerConfig> = all_configs(cfg.g(), cfg.n_layers).filter(|c| budget.admits(&cfg, c)).collect();
            let losses = measure_all(&model, data, &configs)?;
            let best = configs
                .into_iter()
                .zip(losses)
                .min_by(|(ca, la), (cb, lb)| {
                    la.total_cmp(lb)
                        .then(budget.cost(&cfg, cb).cmp(&budget.cost(&cfg, ca)))
                        .then_with(|| ca.as_slice().cmp(cb.as_slice()))
                })
                .ok_or_else(|| Error::Budget("no config fits the budget".into()))?;
            SearchResult { budget, config: best.0, predicted_loss: None, measured_loss: Some(best.1), method: "exhaustive".into() }
        }
    };
    emit(&result, a.out.as_deref())
}

fn read_prompt(path: &Path, token_ids: bool) -> Result<Vec<usize>> {
    let bytes = read_file(path, "prompt")?;
    if !token_ids {
        return Ok(encode_bytes(&bytes));
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Config("prompt ids are not UTF-8".into()))?;
    text.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| Error::Config(format!("bad token id {t:?} in prompt"))))
        .collect()
}

fn transcript(model: &MatDecoderModel, tokens: &[usize]) -> String {
    if model.config().vocab_size >= 256 {
        String::from_utf8_lossy(&decode_bytes(tokens)).into_owned()
    } else {
        tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Serialize)]
struct SpecdecodeReport {
    transcript: String,
    generated: Vec<usize>,
    stats: SpecStats,
}

pub fn specdecode(a: &SpecdecodeArgs) -> Result<()> {
    let (model, _) = load(&a.checkpoint)?;
    let draft = parse_config(&model, &a.draft)?;
    let verifier = parse_config(&model, &a.verifier)?;
    let prompt = read_prompt(&a.prompt_file, a.token_ids)?;
    let vocab = model.config().vocab_size;
    if let Some(&t) = prompt.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index(format!("prompt token {t} outside vocabulary of {vocab}")));
    }
    let mut params = match a.temperature {
        Some(t) => DecodeParams::sample(a.max_tokens, t, a.seed),
        None => DecodeParams::greedy(a.max_tokens),
    };
    params.draft_config = Some(draft);
    params.verifier_config = Some(verifier);
    params.lookahead = a.lookahead;
    params.shared_cache = a.shared_cache;
    let (generated, stats) = speculative_decode(&model, &prompt, &params)?;
    let report = SpecdecodeReport { transcript: transcript(&model, &generated), generated, stats };
    emit(&report, a.out.as_deref())
}

/// `n` prefixes of `len` tokens at evenly spaced offsets of `tokens`.
pub fn prefixes(tokens: &[usize], n: usize, len: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || len == 0 || tokens.len() < len {
        return Err(Error::Length(format!("cannot take {n} prefixes of {len} tokens from {} tokens", tokens.len())));
    }
    let span = tokens.len() - len;
    Ok((0..n).map(|j| tokens[j * span / n..][..len].to_vec()).collect())
}

#[derive(Serialize)]
struct ConsistencyRow {
    granularity: usize,
    config: LayerConfig,
    params: u64,
    token_match: f64,
    kl: f64,
}

#[derive(Serialize)]
struct ConsistencyReport {
    reference: LayerConfig,
    teacher_forced: bool,
    reverse_kl: bool,
    rows: Vec<ConsistencyRow>,
}

pub fn consistency(a: &ConsistencyArgs) -> Result<()> {
    let (model, extras) = load(&a.checkpoint)?;
    let reference = match &a.reference {
        Some(s) => parse_config(&model, s)?,
        None => model.full_config(),
    };
    let data = EvalData::resolve(RunMeta::from_extras(&extras).as_ref(), &a.source)?
        .ok_or_else(|| Error::Config("consistency needs --corpus".into()))?;
    let starts = prefixes(&data.tokens, a.prefixes, a.prefix_len)?;
    let cfg = model.config();
    let configs: Vec<(usize, LayerConfig)> = (0..cfg.g())
        .map(|i| (i, cfg.uniform(i)))
        .filter(|(_, c)| c != &reference && model.check_config(c).is_ok())
        .collect();
    let rows = par::map(&configs, |(i, c)| {
        let small = Submodel::new(&model, c)?;
        let large = Submodel::new(&model, &reference)?;
        Ok(ConsistencyRow {
            granularity: i + 1,
            params: model.param_count(c, false),
            token_match: consistency_token_match(small, large, &starts, a.horizon, a.teacher_forced)?,
            kl: consistency_kl(small, large, &data.tokens, data.seq, a.reverse_kl)?,
            config: c.clone(),
        })
    })?;
    let report = ConsistencyReport { reference, teacher_forced: a.teacher_forced, reverse_kl: a.reverse_kl, rows };
    emit(&report, a.out.as_deref())
}

pub fn retrieve(a: &RetrieveArgs) -> Result<()> {
    let spec = ClusterSpec::default();
    let data = synthetic_clusters(&spec, a.seed)?;
    let cfg = ModelConfig::standard(a.d_model, a.layers, a.heads, spec.vocab_size(), spec.seq_len + 8);
    let seq = spec.seq_len - 1;
    let mut strategy = TrainingStrategy::new(StrategyKind::Matformer, a.steps, 16 * seq, seq, a.seed);
    strategy.lr.warmup_steps = a.steps / 10;
    let mut universal = MatDecoderModel::new(cfg.clone(), a.seed)?;
    train_encoder(&mut universal, &strategy, &data.train, spec.classes)?;
    let matched = strategy.budget_matched(StrategyKind::Independent, cfg.g());
    let mut baselines = Vec::new();
    for (k, c) in baseline_configs(&cfg).into_iter().enumerate() {
        let seed = baseline_seed(a.seed, k);
        let mut b = MatDecoderModel::new(c, seed)?;
        train_encoder(&mut b, &TrainingStrategy { seed, ..matched.clone() }, &data.train, spec.classes)?;
        baselines.push(b);
    }
    let report = adaptive_retrieval_experiment(&universal, &baselines, &data)?;
    if let Some(path) = &a.index_out {
        EmbeddingIndex::build(&universal, &universal.full_config(), &data.docs)?.save(path)?;
    }
    emit(&report, a.out.as_deref())
}

pub fn read_scaling_csv(path: &Path) -> Result<Vec<ScalingPoint>> {
    let bytes = read_file(path, "scaling CSV")?;
    let bad = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let headers: Vec<String> = r.headers().map_err(bad)?.iter().map(str::to_string).collect();
    if headers != ["N", "D", "loss"] {
        return Err(Error::Config(format!("{}: expected header N,D,loss, found {}", path.display(), headers.join(","))));
    }
    r.deserialize().map(|row| row.map_err(bad)).collect()
}

pub fn scaling_fit(a: &ScalingFitArgs) -> Result<()> {
    let points = read_scaling_csv(&a.input)?;
    let fit = fit_power_law(&points)?;
    emit(&fit, a.out.as_deref())
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    write_file(&a.out, synthetic_text(a.seed, a.bytes).as_bytes())
}

#[derive(Serialize)]
struct LossCsvRow {
    checkpoint: String,
    granularity: usize,
    config: String,
    params: u64,
    flops_per_token: u64,
    loss: f64,
}

#[derive(Serialize)]
struct ParetoCsvRow {
    checkpoint: String,
    config: String,
    params: u64,
    loss: f64,
    on_frontier: bool,
}

#[derive(Serialize)]
struct ConsistencyCsvRow {
    checkpoint: String,
    granularity: usize,
    config: String,
    params: u64,
    token_match: f64,
    kl: f64,
}

/// Prefix length and horizon for report consistency, fitted to the context.
fn consistency_shape(ctx: usize) -> (usize, usize) {
    let len = 16.min(ctx / 2).max(1);
    (len, 16.min(ctx - len))
}

fn universal_report(dir: &Path, model: &MatDecoderModel, data: &EvalData, max_configs: u128) -> Result<()> {
    let cfg = model.config();
    let (g, l) = (cfg.g(), cfg.n_layers);
    let uniform: Vec<LayerConfig> = (0..g).map(|i| cfg.uniform(i)).collect();
    let mut configs: Vec<LayerConfig> = if mix_n_match_count(g, l).is_some_and(|n| n <= max_configs) {
        all_configs(g, l).collect()
    } else {
        least_slope_candidates(l, g)
    };
    for u in &uniform {
        if !configs.contains(u) {
            configs.push(u.clone());
        }
    }
    let chunk = configs.len().div_ceil(par::threads()?).max(1);
    let parts: Vec<&[LayerConfig]> = configs.chunks(chunk).collect();
    let mut points: Vec<SweepPoint> =
        par::map(&parts, |part| pareto_sweep(model, &data.tokens, part, data.seq))?.into_iter().flatten().collect();
    mark_frontier(&mut points);
    points.sort_by(|a, b| {
        a.params.cmp(&b.params).then(a.loss.total_cmp(&b.loss)).then_with(|| a.config.as_slice().cmp(b.config.as_slice()))
    });
    let pareto: Vec<ParetoCsvRow> = points
        .iter()
        .map(|p| ParetoCsvRow {
            checkpoint: MODEL_FILE.into(),
            config: p.config.to_string(),
            params: p.params,
            loss: p.loss,
            on_frontier: p.on_frontier,
        })
        .collect();
    write_csv(&dir.join("pareto.csv"), &pareto)?;

    let losses: Vec<LossCsvRow> = uniform
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let p = points.iter().find(|p| &p.config == u).expect("uniform configs are swept");
            LossCsvRow {
                checkpoint: MODEL_FILE.into(),
                granularity: i + 1,
                config: u.to_string(),
                params: p.params,
                flops_per_token: model.flops_per_token(u, Phase::Infer),
                loss: p.loss,
            }
        })
        .collect();
    write_csv(&dir.join("loss_vs_params.csv"), &losses)?;

    let (len, horizon) = consistency_shape(cfg.context_len);
    let starts = prefixes(&data.tokens, 16, len)?;
    let full = model.full_config();
    let small: Vec<(usize, LayerConfig)> = uniform.iter().cloned().enumerate().take(g - 1).collect();
    let rows = par::map(&small, |(i, c)| {
        let (s, f) = (Submodel::new(model, c)?, Submodel::new(model, &full)?);
        Ok(ConsistencyCsvRow {
            checkpoint: MODEL_FILE.into(),
            granularity: i + 1,
            config: c.to_string(),
            params: model.param_count(c, false),
            token_match: consistency_token_match(s, f, &starts, horizon, false)?,
            kl: consistency_kl(s, f, &data.tokens, data.seq, false)?,
        })
    })?;
    write_csv(&dir.join("consistency.csv"), &rows)
}

fn baseline_report(dir: &Path, models: &[MatDecoderModel], data: &EvalData) -> Result<()> {
    let indexed: Vec<(usize, &MatDecoderModel)> = models.iter().enumerate().collect();
    let mut points = par::map(&indexed, |(k, m)| {
        let c = m.full_config();
        Ok((k + 1, SweepPoint { params: m.param_count(&c, false), loss: data.loss(m, &c)?, config: c, on_frontier: false }))
    })?;
    let losses: Vec<LossCsvRow> = points
        .iter()
        .map(|(k, p)| LossCsvRow {
            checkpoint: baseline_file(*k),
            granularity: *k,
            config: p.config.to_string(),
            params: p.params,
            flops_per_token: models[k - 1].flops_per_token(&p.config, Phase::Infer),
            loss: p.loss,
        })
        .collect();
    write_csv(&dir.join("loss_vs_params.csv"), &losses)?;

    points.sort_by(|a, b| a.1.params.cmp(&b.1.params).then(a.1.loss.total_cmp(&b.1.loss)).then(a.0.cmp(&b.0)));
    let mut sweep: Vec<SweepPoint> = points.iter().map(|(_, p)| p.clone()).collect();
    // Already in frontier order; the stable sort inside keeps it aligned.
    mark_frontier(&mut sweep);
    let pareto: Vec<ParetoCsvRow> = points
        .iter()
        .zip(&sweep)
        .map(|((k, p), s)| ParetoCsvRow {
            checkpoint: baseline_file(*k),
            config: p.config.to_string(),
            params: p.params,
            loss: p.loss,
            on_frontier: s.on_frontier,
        })
        .collect();
    write_csv(&dir.join("pareto.csv"), &pareto)?;

    let largest = models.last().ok_or_else(|| Error::Config("run has no baselines".into()))?;
    let (len, horizon) = consistency_shape(largest.config().context_len);
    let starts = prefixes(&data.tokens, 16, len)?;
    let lf = largest.full_config();
    let rows = par::map(&indexed[..indexed.len() - 1], |(k, m)| {
        let c = m.full_config();
        let (s, f) = (Submodel::new(m, &c)?, Submodel::new(largest, &lf)?);
        Ok(ConsistencyCsvRow {
            checkpoint: baseline_file(k + 1),
            granularity: k + 1,
            config: c.to_string(),
            params: m.param_count(&c, false),
            token_match: consistency_token_match(s, f, &starts, horizon, false)?,
            kl: consistency_kl(s, f, &data.tokens, data.seq, false)?,
        })
    })?;
    write_csv(&dir.join("consistency.csv"), &rows)
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let dir = &a.run_dir;
    for name in [RUN_FILE, LOG_FILE] {
        if !dir.join(name).exists() {
            return Err(Error::Config(format!("{} is missing {name}; is this a completed run?", dir.display())));
        }
    }
    let log_text = read_file(&dir.join(LOG_FILE), "training log")?;
    let log = TrainingLog::read_jsonl(&String::from_utf8_lossy(&log_text))
        .map_err(|e| Error::Config(format!("unreadable training log: {e}")))?;
    if log.records.is_empty() {
        return Err(Error::Config("training log is empty".into()));
    }
    let run = RunConfig::load(&dir.join(RUN_FILE))?;
    let data = EvalData::load(&run.corpus, run.val_fraction, run.seed, run.eval_tokens, run.strategy.seq_len)?;
    if run.strategy.kind == StrategyKind::Independent {
        let models = (1..=run.model.g())
            .map(|k| load(&dir.join(baseline_file(k))).map(|(m, _)| m))
            .collect::<Result<Vec<_>>>()?;
        baseline_report(dir, &models, &data)
    } else {
        let (model, _) = load(&dir.join(MODEL_FILE))?;
        universal_report(dir, &model, &data, a.max_configs)
    }
}
