use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernels::Activation;

/// The nested widths shared by every block: granularity `i` keeps the first
/// `ffn_widths[i]` FFN neurons (and the first `head_counts[i]` heads when
/// heads are nested too).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GranularitySpec {
    pub ffn_widths: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_counts: Option<Vec<usize>>,
}

impl GranularitySpec {
    /// `d_ff * {1/8, 1/4, 1/2, 1}`.
    pub fn exponential(d_ff: usize) -> Self {
        Self { ffn_widths: vec![d_ff / 8, d_ff / 4, d_ff / 2, d_ff], head_counts: None }
    }

    pub fn single(d_ff: usize) -> Self {
        Self { ffn_widths: vec![d_ff], head_counts: None }
    }

    pub fn g(&self) -> usize {
        self.ffn_widths.len()
    }

    pub fn width(&self, gran: usize) -> usize {
        self.ffn_widths[gran]
    }

    pub fn heads_nested(&self) -> bool {
        self.head_counts.is_some()
    }

    pub fn validate(&self, d_ff: usize, n_heads: usize) -> Result<()> {
        fn strictly_increasing(v: &[usize]) -> bool {
            v.first().is_some_and(|&x| x >= 1) && v.windows(2).all(|w| w[0] < w[1])
        }
        if !strictly_increasing(&self.ffn_widths) {
            return Err(Error::Config(format!(
                "FFN widths must be strictly increasing and positive, got {:?}",
                self.ffn_widths
            )));
        }
        if self.ffn_widths.last() != Some(&d_ff) {
            return Err(Error::Config(format!(
                "largest FFN width must equal d_ff={d_ff}, got {:?}",
                self.ffn_widths
            )));
        }
        if let Some(h) = &self.head_counts {
            if h.len() != self.g() || !strictly_increasing(h) || h.last() != Some(&n_heads) {
                return Err(Error::Config(format!(
                    "head counts {h:?} must be strictly increasing, one per granularity, ending at n_heads={n_heads}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub granularity: GranularitySpec,
    #[serde(default)]
    pub sigma: Activation,
}

impl ModelConfig {
    /// FFN ratio 4 and the four exponentially spaced granularities.
    pub fn standard(d_model: usize, n_layers: usize, n_heads: usize, vocab_size: usize, context_len: usize) -> Self {
        let d_ff = 4 * d_model;
        Self {
            d_model,
            d_ff,
            n_layers,
            n_heads,
            vocab_size,
            context_len,
            granularity: GranularitySpec::exponential(d_ff),
            sigma: Activation::SquaredRelu,
        }
    }

    /// Same architecture with a single FFN width: the independently trained
    /// baseline of that size.
    pub fn baseline(&self, d_ff: usize) -> Self {
        Self { d_ff, granularity: GranularitySpec::single(d_ff), ..self.clone() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn g(&self) -> usize {
        self.granularity.g()
    }

    /// Heads used at a granularity.
    pub fn heads_at(&self, gran: usize) -> usize {
        match &self.granularity.head_counts {
            Some(h) => h[gran],
            None => self.n_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.vocab_size == 0 || self.context_len == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model={} is not divisible by n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        self.granularity.validate(self.d_ff, self.n_heads)
    }

    pub fn uniform(&self, gran: usize) -> LayerConfig {
        LayerConfig::uniform(gran, self.n_layers)
    }

    pub fn full(&self) -> LayerConfig {
        self.uniform(self.g() - 1)
    }

    pub fn check_layer_config(&self, config: &LayerConfig) -> Result<()> {
        if config.len() != self.n_layers {
            return Err(Error::Config(format!(
                "layer config has {} entries but the model has {} layers",
                config.len(),
                self.n_layers
            )));
        }
        if let Some(&bad) = config.iter().find(|&&i| i >= self.g()) {
            return Err(Error::Config(format!(
                "granularity {} out of range 1..={}",
                bad + 1,
                self.g()
            )));
        }
        Ok(())
    }
}

/// Per-layer granularity choice identifying one Mix'n'Match submodel.
///
/// Indices are 0-based in memory; text and JSON forms are 1-based
/// (`"1,1,2,4"`), the convention used throughout the CLI and reports.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerConfig(Vec<usize>);

impl LayerConfig {
    pub fn new(per_layer: Vec<usize>) -> Self {
        Self(per_layer)
    }

    pub fn uniform(gran: usize, n_layers: usize) -> Self {
        Self(vec![gran; n_layers])
    }

    pub fn from_one_based(v: &[usize]) -> Result<Self> {
        if v.contains(&0) {
            return Err(Error::Config("granularity indices are 1-based".into()));
        }
        Ok(Self(v.iter().map(|i| i - 1).collect()))
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_uniform(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.0.windows(2).all(|w| w[0] <= w[1])
    }

    /// Element-wise `self <= other`.
    pub fn nested_in(&self, other: &LayerConfig) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn max_adjacent_gap(&self) -> usize {
        self.0.windows(2).map(|w| w[0].abs_diff(w[1])).max().unwrap_or(0)
    }
}

impl std::ops::Index<usize> for LayerConfig {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

impl fmt::Display for LayerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| (i + 1).to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LayerConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parsed: std::result::Result<Vec<usize>, _> =
            s.split(',').map(|p| p.trim().parse::<usize>()).collect();
        match parsed {
            Ok(v) if !v.is_empty() => Self::from_one_based(&v),
            _ => Err(Error::Config(format!("malformed layer config {s:?}; expected e.g. \"1,2,2,4\""))),
        }
    }
}

impl Serialize for LayerConfig {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_one_based().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LayerConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<usize>::deserialize(d)?;
        Self::from_one_based(&v).map_err(serde::de::Error::custom)
    }
}

/// Number of distinct Mix'n'Match configurations, `g^l`, or `None` on
/// overflow.
pub fn mix_n_match_count(g: usize, n_layers: usize) -> Option<u128> {
    (g as u128).checked_pow(n_layers as u32)
}

/// Every `LayerConfig` of length `n_layers` over `g` granularities, in
/// lexicographic order.
pub fn all_configs(g: usize, n_layers: usize) -> impl Iterator<Item = LayerConfig> {
    let mut next = if g == 0 { None } else { Some(vec![0usize; n_layers]) };
    std::iter::from_fn(move || {
        let current = next.take()?;
        let mut succ = current.clone();
        let mut pos = n_layers;
        while pos > 0 {
            pos -= 1;
            if succ[pos] + 1 < g {
                succ[pos] += 1;
                next = Some(succ);
                break;
            }
            succ[pos] = 0;
        }
        Some(LayerConfig(current))
    })
}
