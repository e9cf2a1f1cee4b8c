//! Nearest-neighbour retrieval with mismatched document and query encoders.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::dot;
use crate::model::{BoundParams, LayerConfig, MatDecoderModel};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{sample_granularity, LogRecord, StrategyKind, Trainer, TrainingLog, TrainingStrategy};

/// Mean of the final hidden states over positions where `mask` is true.
pub fn embed_masked(model: &MatDecoderModel, config: &LayerConfig, tokens: &[usize], mask: &[bool]) -> Result<Vec<f64>> {
    if tokens.len() != mask.len() {
        return Err(Error::Dimension(format!("{} tokens but {} mask entries", tokens.len(), mask.len())));
    }
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Err(Error::Length("embedding needs at least one unmasked token".into()));
    }
    let h = model.hidden_states(tokens, config, None)?;
    let d = model.config().d_model;
    let mut out = vec![0.0; d];
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out.iter_mut().zip(h.row(r)).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= kept as f64);
    Ok(out)
}

/// Mean-pooled final hidden state of a whole sequence.
pub fn embed(model: &MatDecoderModel, config: &LayerConfig, tokens: &[usize]) -> Result<Vec<f64>> {
    embed_masked(model, config, tokens, &vec![true; tokens.len()])
}

/// Embedding with positions holding `pad` left out of the pool.
pub fn embed_unpadded(model: &MatDecoderModel, config: &LayerConfig, tokens: &[usize], pad: usize) -> Result<Vec<f64>> {
    let mask: Vec<bool> = tokens.iter().map(|&t| t != pad).collect();
    embed_masked(model, config, tokens, &mask)
}

/// Identifies the encoder that produced an index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderFingerprint {
    pub checkpoint: String,
    pub config: LayerConfig,
}

impl EncoderFingerprint {
    pub fn of(model: &MatDecoderModel, config: &LayerConfig) -> Self {
        Self { checkpoint: checkpoint::model_fingerprint(model), config: config.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub vectors: Tensor,
    pub labels: Vec<usize>,
    pub fingerprint: EncoderFingerprint,
}

#[derive(Serialize, Deserialize)]
struct IndexExtras {
    labels: Vec<usize>,
    fingerprint: EncoderFingerprint,
}

const INDEX_TENSOR: &str = "index.vectors";

impl EmbeddingIndex {
    pub fn new(vectors: Tensor, labels: Vec<usize>, fingerprint: EncoderFingerprint) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "index of shape {:?} with {} labels",
                vectors.shape(),
                labels.len()
            )));
        }
        Ok(Self { vectors, labels, fingerprint })
    }

    /// Embeds every sequence with one encoder.
    pub fn build(model: &MatDecoderModel, config: &LayerConfig, items: &[(Vec<usize>, usize)]) -> Result<Self> {
        let vectors = embed_all(model, config, items)?;
        Self::new(vectors, items.iter().map(|(_, l)| *l).collect(), EncoderFingerprint::of(model, config))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.row_len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extras = serde_json::to_value(IndexExtras { labels: self.labels.clone(), fingerprint: self.fingerprint.clone() })?;
        let mut buf = Vec::new();
        checkpoint::write_container(&mut buf, None, &[(INDEX_TENSOR.to_string(), &self.vectors)], &extras)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::read_container(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let extras: IndexExtras = serde_json::from_value(c.extras)?;
        let (_, vectors) = c
            .tensors
            .into_iter()
            .find(|(n, _)| n == INDEX_TENSOR)
            .ok_or_else(|| Error::Format("container holds no index".into()))?;
        Self::new(vectors, extras.labels, extras.fingerprint)
    }
}

/// `[N, d_model]` embeddings of `items`.
pub fn embed_all(model: &MatDecoderModel, config: &LayerConfig, items: &[(Vec<usize>, usize)]) -> Result<Tensor> {
    let d = model.config().d_model;
    let mut data = Vec::with_capacity(items.len() * d);
    for (seq, _) in items {
        data.extend(embed(model, config, seq)?);
    }
    Tensor::new(&[items.len(), d], data)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Similarities closer than this count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Index of the most cosine-similar vector; lowest index on ties. With
/// `skip`, that row is never returned.
pub fn nearest(index: &EmbeddingIndex, query: &[f64], skip: Option<usize>) -> Result<usize> {
    if query.len() != index.dim() {
        return Err(Error::Dimension(format!("query of {} dims against index of {}", query.len(), index.dim())));
    }
    let q = unit(query);
    let mut best: Option<(usize, f64)> = None;
    for i in 0..index.len() {
        if Some(i) == skip {
            continue;
        }
        let s = dot(&q, &unit(index.vectors.row(i)));
        if best.map_or(true, |(_, b)| s > b + TIE_TOLERANCE) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::Length("index has no candidate rows".into()))
}

/// 1-NN label accuracy in percent. `exclude_self` drops index row `i` when
/// answering query `i` (for querying an index with its own vectors).
pub fn knn_eval(index: &EmbeddingIndex, queries: &Tensor, labels: &[usize], exclude_self: bool) -> Result<f64> {
    if index.is_empty() {
        return Err(Error::Length("empty index".into()));
    }
    if queries.shape().len() != 2 || queries.row_len() != index.dim() {
        return Err(Error::Dimension(format!(
            "queries of shape {:?} against index of {} dims",
            queries.shape(),
            index.dim()
        )));
    }
    if queries.rows() != labels.len() {
        return Err(Error::Dimension(format!("{} queries with {} labels", queries.rows(), labels.len())));
    }
    let mut hits = 0;
    for (i, &label) in labels.iter().enumerate() {
        let j = nearest(index, queries.row(i), exclude_self.then_some(i))?;
        hits += usize::from(index.labels[j] == label);
    }
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Labelled sequences drawn from class-specific token distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub classes: usize,
    /// Content tokens; the vocabulary is one larger to hold [`ClusterSpec::pad`].
    pub content_vocab: usize,
    pub seq_len: usize,
    /// Preferred tokens per class.
    pub signature: usize,
    /// Probability of drawing from the class signature instead of uniformly.
    pub signal: f64,
    pub n_train: usize,
    pub n_docs: usize,
    pub n_queries: usize,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            classes: 32,
            content_vocab: 63,
            seq_len: 24,
            signature: 6,
            signal: 0.6,
            n_train: 4096,
            n_docs: 512,
            n_queries: 256,
        }
    }
}

impl ClusterSpec {
    pub fn vocab_size(&self) -> usize {
        self.content_vocab + 1
    }

    pub fn pad(&self) -> usize {
        self.content_vocab
    }

    pub fn chance(&self) -> f64 {
        100.0 / self.classes as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDataset {
    pub spec: ClusterSpec,
    pub train: Vec<(Vec<usize>, usize)>,
    pub docs: Vec<(Vec<usize>, usize)>,
    pub queries: Vec<(Vec<usize>, usize)>,
}

pub fn synthetic_clusters(spec: &ClusterSpec, seed: u64) -> Result<ClusterDataset> {
    if spec.classes == 0 || spec.signature == 0 || spec.signature > spec.content_vocab || spec.seq_len < 2 {
        return Err(Error::Config("degenerate cluster specification".into()));
    }
    let mut rng = rng::substream(seed, "clusters");
    let all: Vec<usize> = (0..spec.content_vocab).collect();
    let signatures: Vec<Vec<usize>> = (0..spec.classes)
        .map(|_| all.choose_multiple(&mut rng, spec.signature).copied().collect())
        .collect();
    let mut draw = |n: usize| -> Vec<(Vec<usize>, usize)> {
        (0..n)
            .map(|_| {
                let class = rng.gen_range(0..spec.classes);
                let seq = (0..spec.seq_len)
                    .map(|_| {
                        if rng.gen_bool(spec.signal) {
                            *signatures[class].choose(&mut rng).expect("signature is nonempty")
                        } else {
                            rng.gen_range(0..spec.content_vocab)
                        }
                    })
                    .collect();
                (seq, class)
            })
            .collect()
    };
    let train = draw(spec.n_train);
    let docs = draw(spec.n_docs);
    let queries = draw(spec.n_queries);
    Ok(ClusterDataset { spec: spec.clone(), train, docs, queries })
}

/// Next-token loss plus cross-entropy of a linear classifier on the pooled
/// final hidden state.
#[allow(clippy::too_many_arguments)]
pub fn classification_loss(
    graph: &mut Graph,
    model: &MatDecoderModel,
    bound: &BoundParams,
    head: Var,
    batch: &[&(Vec<usize>, usize)],
    config: &LayerConfig,
) -> Result<Var> {
    let t = batch[0].0.len() - 1;
    let inputs: Vec<usize> = batch.iter().flat_map(|(s, _)| s[..t].iter().copied()).collect();
    let targets: Vec<usize> = batch.iter().flat_map(|(s, _)| s[1..].iter().copied()).collect();
    let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
    let hidden = model.graph_hidden(graph, bound, &inputs, batch.len(), t, config)?;
    let logits = graph.matmul_nt(hidden, bound.token_embedding())?;
    let lm = graph.softmax_cross_entropy(logits, &targets)?;
    let pooled = graph.mean_pool(hidden, batch.len(), t)?;
    let class_logits = graph.matmul_nt(pooled, head)?;
    let cls = graph.softmax_cross_entropy(class_logits, &labels)?;
    graph.add(lm, cls)
}

/// Trains `model` (granularity sampling when it has several) on the
/// labelled sequences. Returns the classifier head and the log.
pub fn train_encoder(
    model: &mut MatDecoderModel,
    strategy: &TrainingStrategy,
    data: &[(Vec<usize>, usize)],
    classes: usize,
) -> Result<(Tensor, TrainingLog)> {
    let g = model.config().g();
    strategy.validate(g)?;
    if data.is_empty() {
        return Err(Error::Length("no training sequences".into()));
    }
    let l = model.config().n_layers;
    let d = model.config().d_model;
    let probs = strategy.probs(g);
    let mut sampler = rng::substream(strategy.seed, "sampling");
    let mut picker = rng::substream(strategy.seed, "data");
    let head = Tensor::randn(&[classes, d], 0.02, &mut rng::substream(strategy.seed, "head"));
    let mut trainer = Trainer::new(model.clone(), vec![head], strategy);
    let b = strategy.batch_size();
    let seq = data[0].0.len() - 1;
    let mut log = TrainingLog::default();
    for step in 1..=strategy.steps {
        let i = sample_granularity(&mut sampler, &probs)?;
        let config = LayerConfig::uniform(i, l);
        let batch: Vec<&(Vec<usize>, usize)> = (0..b).map(|_| &data[picker.gen_range(0..data.len())]).collect();
        let (loss, lr) = trainer.step(|gr, m, bound, extra| classification_loss(gr, m, bound, extra[0], &batch, &config))?;
        log.records.push(LogRecord {
            step,
            strategy: strategy.kind,
            granularity: (strategy.kind == StrategyKind::Matformer).then_some(i + 1),
            config: None,
            model: None,
            loss,
            lr,
            tokens_seen: (step * b * seq) as u64,
        });
    }
    *model = trainer.model;
    let head = trainer.extra.pop().expect("head was registered");
    Ok((head, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub encoder: String,
    pub config: LayerConfig,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub chance: f64,
    /// Universal model at every uniform granularity, smallest first; the
    /// last row is the matched-encoder case.
    pub matformer: Vec<RetrievalRow>,
    pub baselines: Vec<RetrievalRow>,
}

impl RetrievalReport {
    pub fn matched(&self) -> f64 {
        self.matformer.last().map_or(0.0, |r| r.accuracy)
    }
}

/// Documents embedded once by the full universal model; queries embedded
/// by each nested submodel and by each independent baseline.
pub fn adaptive_retrieval_experiment(
    universal: &MatDecoderModel,
    baselines: &[MatDecoderModel],
    data: &ClusterDataset,
) -> Result<RetrievalReport> {
    let index = EmbeddingIndex::build(universal, &universal.full_config(), &data.docs)?;
    let labels: Vec<usize> = data.queries.iter().map(|(_, l)| *l).collect();
    let names = ["S", "M", "L", "XL"];
    let name = |i: usize, g: usize| {
        if g == 4 {
            names[i].to_string()
        } else {
            format!("g{}", i + 1)
        }
    };
    let g = universal.config().g();
    let mut matformer = Vec::new();
    for i in 0..g {
        let config = universal.config().uniform(i);
        let q = embed_all(universal, &config, &data.queries)?;
        matformer.push(RetrievalRow { encoder: format!("matformer-{}", name(i, g)), accuracy: knn_eval(&index, &q, &labels, false)?, config });
    }
    let mut rows = Vec::new();
    for (k, b) in baselines.iter().enumerate() {
        let config = b.full_config();
        let q = embed_all(b, &config, &data.queries)?;
        let encoder = format!("baseline-{}", name(k, baselines.len()));
        rows.push(RetrievalRow { encoder, accuracy: knn_eval(&index, &q, &labels, false)?, config });
    }
    Ok(RetrievalReport { chance: data.spec.chance(), matformer, baselines: rows })
}
