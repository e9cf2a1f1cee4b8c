//! Per-layer key/value cache for incremental decoding.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
struct LayerCache {
    width: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl LayerCache {
    fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.keys.len() / self.width
        }
    }
}

/// Keys and values of every processed position, one row per token.
///
/// When only the FFN is nested, attention projections are shared by every
/// granularity, rows have width `d_model` everywhere, and one cache can serve
/// a draft and a verifier submodel alike.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self { layers: vec![LayerCache::default(); n_layers], len: 0 }
    }

    /// Tokens processed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.layers[layer].keys
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.layers[layer].values
    }

    pub fn width(&self, layer: usize) -> usize {
        self.layers[layer].width
    }

    /// Drop every position at or beyond `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for l in &mut self.layers {
            l.keys.truncate(len * l.width);
            l.values.truncate(len * l.width);
        }
        self.len = len;
    }

    pub(crate) fn append(&mut self, layer: usize, keys: &[f64], values: &[f64], width: usize) -> Result<()> {
        let lc = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Cache(format!("cache has no layer {layer}")))?;
        if lc.rows() != self.len {
            return Err(Error::Cache(format!(
                "layer {layer} holds {} rows but the cache length is {}",
                lc.rows(),
                self.len
            )));
        }
        if lc.rows() > 0 && lc.width != width {
            return Err(Error::Cache(format!(
                "layer {layer} caches rows of width {} but {width} was supplied",
                lc.width
            )));
        }
        lc.width = width;
        lc.keys.extend_from_slice(keys);
        lc.values.extend_from_slice(values);
        Ok(())
    }

    /// Called once every layer has appended `n` rows.
    pub(crate) fn advance(&mut self, n: usize) -> Result<()> {
        let target = self.len + n;
        if let Some((j, l)) = self.layers.iter().enumerate().find(|(_, l)| l.rows() != target) {
            return Err(Error::Cache(format!("layer {j} holds {} rows, expected {target}", l.rows())));
        }
        self.len = target;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_advance_truncate() {
        let mut c = KvCache::new(2);
        for layer in 0..2 {
            c.append(layer, &[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2).unwrap();
        }
        c.advance(2).unwrap();
        assert_eq!(c.len(), 2);
        c.truncate(1);
        assert_eq!(c.keys(1), &[1.0, 2.0]);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn width_mismatch_is_a_cache_error() {
        let mut c = KvCache::new(1);
        c.append(0, &[1.0, 2.0], &[1.0, 2.0], 2).unwrap();
        c.advance(1).unwrap();
        assert!(matches!(c.append(0, &[1.0], &[1.0], 1), Err(Error::Cache(_))));
    }

    #[test]
    fn incomplete_advance_is_rejected() {
        let mut c = KvCache::new(2);
        c.append(0, &[1.0], &[1.0], 1).unwrap();
        assert!(c.advance(1).is_err());
    }
}
