//! Budgeted Mix'n'Match selection: the least-slope heuristic, shape
//! families, a ridge loss predictor, evolutionary search and Pareto sweeps.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, LayerConfig, MatDecoderModel, ModelConfig, Phase};
use crate::rng;
use crate::train::evaluate_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMetric {
    /// Non-embedding parameters.
    #[default]
    Params,
    FlopsPerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    #[serde(default)]
    pub metric: BudgetMetric,
    pub limit: u64,
}

impl Budget {
    pub fn params(limit: u64) -> Self {
        Self { metric: BudgetMetric::Params, limit }
    }

    pub fn cost(&self, model: &ModelConfig, config: &LayerConfig) -> u64 {
        match self.metric {
            BudgetMetric::Params => model::param_count(model, config, false),
            BudgetMetric::FlopsPerToken => model::flops_per_token(model, config, Phase::Infer),
        }
    }

    pub fn admits(&self, model: &ModelConfig, config: &LayerConfig) -> bool {
        self.cost(model, config) <= self.limit
    }

    /// Budget error unless the smallest uniform submodel fits.
    pub fn check_feasible(&self, model: &ModelConfig) -> Result<()> {
        let smallest = self.cost(model, &model.uniform(0));
        if smallest > self.limit {
            return Err(Error::Budget(format!("limit {} is below the smallest submodel ({smallest})", self.limit)));
        }
        Ok(())
    }
}

/// Candidates of the least-slope rule: `[i]*(l-k) ++ [i+1]*k`.
pub fn least_slope_candidates(n_layers: usize, g: usize) -> Vec<LayerConfig> {
    let mut out = Vec::new();
    for i in 0..g {
        let max_k = if i + 1 < g { n_layers - 1 } else { 0 };
        for k in 0..=max_k {
            let mut v = vec![i; n_layers - k];
            v.extend(std::iter::repeat(i + 1).take(k));
            out.push(LayerConfig::new(v));
        }
    }
    out
}

/// Least-slope selection under an arbitrary additive-or-not cost: the
/// non-decreasing config over at most two adjacent granularities with the
/// largest cost not above `limit`.
pub fn heuristic_select_by<F: Fn(&LayerConfig) -> u64>(n_layers: usize, g: usize, limit: u64, cost: F) -> Result<LayerConfig> {
    least_slope_candidates(n_layers, g)
        .into_iter()
        .filter_map(|c| {
            let k = cost(&c);
            (k <= limit).then_some((k, c))
        })
        .max_by(|(ka, a), (kb, b)| ka.cmp(kb).then_with(|| b.as_slice().cmp(a.as_slice())))
        .map(|(_, c)| c)
        .ok_or_else(|| Error::Budget(format!("no submodel fits within {limit}")))
}

pub fn heuristic_select(budget: &Budget, model: &ModelConfig) -> Result<LayerConfig> {
    budget.check_feasible(model)?;
    heuristic_select_by(model.n_layers, model.g(), budget.limit, |c| budget.cost(model, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Non-decreasing.
    Increasing,
    /// Non-increasing.
    Decreasing,
    /// Rises then falls, and is not monotone.
    IncreasingDecreasing,
    /// Falls then rises, and is not monotone.
    DecreasingIncreasing,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] =
        [Self::Increasing, Self::Decreasing, Self::IncreasingDecreasing, Self::DecreasingIncreasing];
}

fn non_decreasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

fn non_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] >= w[1])
}

/// DFS over sequences that move monotonically in a first direction, then
/// possibly switch once to the opposite one.
fn two_phase(n_layers: usize, g: usize, rising_first: bool, out: &mut Vec<Vec<usize>>) {
    fn go(v: &mut Vec<usize>, switched: bool, n: usize, g: usize, rising_first: bool, out: &mut Vec<Vec<usize>>) {
        if v.len() == n {
            out.push(v.clone());
            return;
        }
        for x in 0..g {
            let next_switched = match v.last() {
                None => false,
                Some(&p) => {
                    let forward = if rising_first { x >= p } else { x <= p };
                    if !switched && forward {
                        false
                    } else if !switched || (if rising_first { x <= p } else { x >= p }) {
                        true
                    } else {
                        continue;
                    }
                }
            };
            v.push(x);
            go(v, next_switched, n, g, rising_first, out);
            v.pop();
        }
    }
    go(&mut Vec::with_capacity(n_layers), false, n_layers, g, rising_first, out);
}

/// Configs of one shape family in lexicographic order.
pub fn enumerate_family(family: ShapeFamily, n_layers: usize, g: usize) -> Vec<LayerConfig> {
    let mut raw = Vec::new();
    match family {
        ShapeFamily::Increasing | ShapeFamily::Decreasing => {
            fn go(v: &mut Vec<usize>, n: usize, g: usize, out: &mut Vec<Vec<usize>>) {
                if v.len() == n {
                    out.push(v.clone());
                    return;
                }
                for x in v.last().copied().unwrap_or(0)..g {
                    v.push(x);
                    go(v, n, g, out);
                    v.pop();
                }
            }
            go(&mut Vec::new(), n_layers, g, &mut raw);
            if family == ShapeFamily::Decreasing {
                raw.iter_mut().for_each(|v| v.reverse());
                raw.sort();
            }
        }
        ShapeFamily::IncreasingDecreasing | ShapeFamily::DecreasingIncreasing => {
            two_phase(n_layers, g, family == ShapeFamily::IncreasingDecreasing, &mut raw);
            raw.retain(|v| !non_decreasing(v) && !non_increasing(v));
        }
    }
    raw.into_iter().map(LayerConfig::new).collect()
}

/// Every shape family, each tagged with its configs.
pub fn enumerate_balanced(n_layers: usize, g: usize) -> impl Iterator<Item = (ShapeFamily, LayerConfig)> {
    ShapeFamily::ALL
        .into_iter()
        .flat_map(move |f| enumerate_family(f, n_layers, g).into_iter().map(move |c| (f, c)))
}

/// Membership predicate matching [`enumerate_family`].
pub fn in_family(family: ShapeFamily, config: &LayerConfig) -> bool {
    let v = config.as_slice();
    let unimodal = |rise_first: bool| {
        let up = |a: usize, b: usize| if rise_first { b >= a } else { b <= a };
        let mut i = 1;
        while i < v.len() && up(v[i - 1], v[i]) {
            i += 1;
        }
        v[i - 1..].windows(2).all(|w| up(w[1], w[0]))
    };
    match family {
        ShapeFamily::Increasing => non_decreasing(v),
        ShapeFamily::Decreasing => non_increasing(v),
        ShapeFamily::IncreasingDecreasing => unimodal(true) && !non_decreasing(v) && !non_increasing(v),
        ShapeFamily::DecreasingIncreasing => unimodal(false) && !non_decreasing(v) && !non_increasing(v),
    }
}

/// Measured `(config, validation loss)` pairs with unique configs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorDataset {
    pairs: Vec<(LayerConfig, f64)>,
}

impl PredictorDataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a pair; returns false (and keeps the first) for a repeated config.
    pub fn push(&mut self, config: LayerConfig, loss: f64) -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss {loss} for {config}")));
        }
        if self.pairs.iter().any(|(c, _)| *c == config) {
            return Ok(false);
        }
        self.pairs.push((config, loss));
        Ok(true)
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (LayerConfig, f64)>) -> Result<Self> {
        let mut d = Self::new();
        for (c, l) in pairs {
            d.push(c, l)?;
        }
        Ok(d)
    }

    pub fn pairs(&self) -> &[(LayerConfig, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Anything that scores a config with a (predicted) loss.
pub trait LossModel {
    fn predict(&self, config: &LayerConfig) -> f64;
}

impl<F: Fn(&LayerConfig) -> f64> LossModel for F {
    fn predict(&self, config: &LayerConfig) -> f64 {
        self(config)
    }
}

/// Ridge regression on per-layer one-hot granularities plus normalized
/// non-embedding parameters, with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPredictor {
    model: ModelConfig,
    weights: Vec<f64>,
    intercept: f64,
    pub lambda: f64,
    pub train_size: usize,
    pub heldout_size: usize,
    /// Mean squared error on the held-out 40%.
    pub heldout_mse: f64,
    /// Held-out MSE of predicting the training mean.
    pub variance_baseline: f64,
}

fn features(model: &ModelConfig, config: &LayerConfig) -> Vec<f64> {
    let g = model.g();
    let mut f = vec![0.0; config.len() * g + 1];
    for (j, &gran) in config.iter().enumerate() {
        f[j * g + gran] = 1.0;
    }
    let full = model::param_count(model, &model.full(), false) as f64;
    f[config.len() * g] = model::param_count(model, config, false) as f64 / full;
    f
}

/// Solves `a x = b` for symmetric positive definite `a` (row-major `n x n`).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Some(x)
}

pub const MIN_PREDICTOR_PAIRS: usize = 32;
const INITIAL_LAMBDA: f64 = 1e-8;

impl LossPredictor {
    pub fn predict_config(&self, config: &LayerConfig) -> f64 {
        let f = features(&self.model, config);
        self.intercept + f.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }
}

impl LossModel for LossPredictor {
    fn predict(&self, config: &LayerConfig) -> f64 {
        self.predict_config(config)
    }
}

fn ridge(x: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    let n = x.len();
    let p = x[0].len();
    let mean_x: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for (r, &t) in x.iter().zip(y) {
        let c: Vec<f64> = r.iter().zip(&mean_x).map(|(a, m)| a - m).collect();
        for i in 0..p {
            rhs[i] += c[i] * (t - mean_y);
            for j in 0..p {
                gram[i * p + j] += c[i] * c[j];
            }
        }
    }
    let mut lambda = INITIAL_LAMBDA;
    while lambda < 1e12 {
        let mut a = gram.clone();
        for i in 0..p {
            a[i * p + i] += lambda;
        }
        if let Some(w) = cholesky_solve(&a, &rhs, p) {
            let intercept = mean_y - w.iter().zip(&mean_x).map(|(a, b)| a * b).sum::<f64>();
            return Ok((w, intercept, lambda));
        }
        lambda *= 10.0;
    }
    Err(Error::Fit("ridge system stayed singular".into()))
}

/// Fits the predictor on a seeded 60/40 split and reports held-out error.
pub fn fit_predictor(data: &PredictorDataset, model: &ModelConfig, seed: u64) -> Result<LossPredictor> {
    if data.len() < MIN_PREDICTOR_PAIRS {
        return Err(Error::Fit(format!("{} pairs, need at least {MIN_PREDICTOR_PAIRS}", data.len())));
    }
    for (c, _) in data.pairs() {
        model.check_layer_config(c)?;
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::substream(seed, "predictor-split"));
    let n_train = (data.len() * 3).div_ceil(5);
    let (train, held) = order.split_at(n_train);
    let x: Vec<Vec<f64>> = train.iter().map(|&i| features(model, &data.pairs()[i].0)).collect();
    let y: Vec<f64> = train.iter().map(|&i| data.pairs()[i].1).collect();
    let (weights, intercept, lambda) = ridge(&x, &y)?;
    let mean_y = y.iter().sum::<f64>() / y.len() as f64;
    let mut p = LossPredictor {
        model: model.clone(),
        weights,
        intercept,
        lambda,
        train_size: train.len(),
        heldout_size: held.len(),
        heldout_mse: 0.0,
        variance_baseline: 0.0,
    };
    let (mut mse, mut base) = (0.0, 0.0);
    for &i in held {
        let (c, t) = &data.pairs()[i];
        mse += (p.predict_config(c) - t).powi(2);
        base += (mean_y - t).powi(2);
    }
    p.heldout_mse = mse / held.len() as f64;
    p.variance_baseline = base / held.len() as f64;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionParams {
    pub population: usize,
    pub iterations: usize,
    pub tournament: usize,
    pub seed: u64,
}

impl Default for EvolutionParams {
    fn default() -> Self {
        Self { population: 64, iterations: 40, tournament: 3, seed: 0 }
    }
}

/// Orders by predicted loss, then larger cost, then lexicographically.
fn rank(a: &(LayerConfig, f64, u64), b: &(LayerConfig, f64, u64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)).then_with(|| a.0.as_slice().cmp(b.0.as_slice()))
}

/// Elitist genetic search over Mix'n'Match configs within `budget`, scored
/// by `predictor`. Returns the best config and its predicted loss.
pub fn evolutionary_search<P: LossModel + ?Sized>(
    predictor: &P,
    budget: &Budget,
    model: &ModelConfig,
    params: &EvolutionParams,
) -> Result<(LayerConfig, f64)> {
    let (l, g) = (model.n_layers, model.g());
    let mut rng = rng::substream(params.seed, "evolution");
    let score = |c: LayerConfig| {
        let p = predictor.predict(&c);
        let k = budget.cost(model, &c);
        (c, p, k)
    };
    let mut seen = HashSet::new();
    let mut pop = Vec::new();
    for i in 0..g {
        let c = model.uniform(i);
        if budget.admits(model, &c) && seen.insert(c.clone()) {
            pop.push(score(c));
        }
    }
    for _ in 0..params.population * 50 {
        if pop.len() >= params.population {
            break;
        }
        let c = LayerConfig::new((0..l).map(|_| rng.gen_range(0..g)).collect());
        if budget.admits(model, &c) && seen.insert(c.clone()) {
            pop.push(score(c));
        }
    }
    if pop.is_empty() {
        return Err(Error::Budget(format!("no feasible config under {}", budget.limit)));
    }
    pop.sort_by(rank);
    let tournament = params.tournament.max(1);
    for _ in 0..params.iterations {
        let mut children = Vec::new();
        for _ in 0..params.population * 10 {
            if children.len() >= params.population {
                break;
            }
            let pick = |rng: &mut rand_chacha::ChaCha8Rng| {
                (0..tournament).map(|_| rng.gen_range(0..pop.len())).min().expect("tournament is nonempty")
            };
            let (a, b) = (pick(&mut rng), pick(&mut rng));
            let mut child: Vec<usize> = (0..l)
                .map(|j| if rng.gen_bool(0.5) { pop[a].0[j] } else { pop[b].0[j] })
                .collect();
            let j = rng.gen_range(0..l);
            child[j] = rng.gen_range(0..g);
            let child = LayerConfig::new(child);
            if budget.admits(model, &child) && seen.insert(child.clone()) {
                children.push(score(child));
            }
        }
        pop.extend(children);
        pop.sort_by(rank);
        pop.truncate(params.population);
    }
    let (c, p, _) = pop.swap_remove(0);
    Ok((c, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub config: LayerConfig,
    /// Non-embedding parameters.
    pub params: u64,
    pub loss: f64,
    pub on_frontier: bool,
}

/// Sorts by params (then loss) and flags the points whose loss is strictly
/// below every smaller-or-equal model's.
pub fn mark_frontier(points: &mut [SweepPoint]) {
    points.sort_by(|a, b| a.params.cmp(&b.params).then(a.loss.total_cmp(&b.loss)));
    let mut best = f64::INFINITY;
    for p in points.iter_mut() {
        p.on_frontier = p.loss < best;
        if p.on_frontier {
            best = p.loss;
        }
    }
}

/// Measures the validation loss of every config and marks the frontier.
pub fn pareto_sweep(model: &MatDecoderModel, tokens: &[usize], configs: &[LayerConfig], seq: usize) -> Result<Vec<SweepPoint>> {
    let mut points = configs
        .iter()
        .map(|c| {
            Ok(SweepPoint {
                config: c.clone(),
                params: model.param_count(c, false),
                loss: evaluate_tokens(model, c, tokens, seq)?,
                on_frontier: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    mark_frontier(&mut points);
    Ok(points)
}

/// One search outcome as emitted by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub budget: Budget,
    pub config: LayerConfig,
    pub predicted_loss: Option<f64>,
    pub measured_loss: Option<f64>,
    pub method: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_count() {
        // g-1 levels with l splits each, plus the top uniform config
        assert_eq!(least_slope_candidates(4, 4).len(), 3 * 4 + 1);
        assert!(least_slope_candidates(5, 3).iter().all(|c| c.is_non_decreasing() && c.max_adjacent_gap() <= 1));
    }

    #[test]
    fn cholesky_small_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&a, &[2.0, 1.0], 2).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
        assert!(cholesky_solve(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0], 2).is_none());
    }

    #[test]
    fn frontier_marks_strict_improvements() {
        let mk = |params, loss| SweepPoint { config: LayerConfig::new(vec![0]), params, loss, on_frontier: false };
        let mut pts = vec![mk(3, 1.0), mk(1, 2.0), mk(2, 2.5), mk(4, 1.0), mk(5, 0.5)];
        mark_frontier(&mut pts);
        let flags: Vec<bool> = pts.iter().map(|p| p.on_frontier).collect();
        assert_eq!(flags, vec![true, false, true, false, true]);
    }
}
