//! Dense row-major `f64` tensors.
//!
//! Storage is reference counted so that prefix row slices (the nested
//! submodel weights `W[0:m]`) are views into the parent buffer rather than
//! copies.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels;

pub const MAX_AXES: usize = 4;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_AXES {
            return Err(Error::Dimension(format!(
                "at most {MAX_AXES} axes supported, got shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), storage: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), storage: Arc::new(vec![0.0; numel]) }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), storage: Arc::new(vec![value; numel]) }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], storage: Arc::new(vec![value]) }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Self { shape: shape.to_vec(), storage: Arc::new(data) }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape: shape.to_vec(), storage: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-axis row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn data(&self) -> &[f64] {
        &self.storage[..self.numel()]
    }

    /// Mutable access. A prefix view is materialised first, so writes never
    /// leak into a parent that other tensors still reference.
    pub fn data_mut(&mut self) -> &mut [f64] {
        let numel = self.numel();
        if self.storage.len() != numel {
            self.storage = Arc::new(self.storage[..numel].to_vec());
        }
        &mut Arc::make_mut(&mut self.storage)[..numel]
    }

    pub fn into_vec(self) -> Vec<f64> {
        let numel = self.numel();
        match Arc::try_unwrap(self.storage) {
            Ok(mut v) => {
                v.truncate(numel);
                v
            }
            Err(shared) => shared[..numel].to_vec(),
        }
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let mut flat = 0;
        for (axis, (&i, &n)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < n, "index {i} out of bounds for axis {axis} of size {n}");
            flat = flat * n + i;
        }
        self.data()[flat]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data()[i * w..(i + 1) * w]
    }

    /// Zero-copy view of the first `k` rows along the leading axis.
    pub fn row_slice(&self, k: usize) -> Result<Self> {
        if self.shape.is_empty() || k > self.shape[0] {
            return Err(Error::Dimension(format!(
                "cannot take {k} rows of tensor with shape {:?}",
                self.shape
            )));
        }
        let mut shape = self.shape.clone();
        shape[0] = k;
        Ok(Self { shape, storage: Arc::clone(&self.storage) })
    }

    /// True when both tensors read from the same underlying buffer.
    pub fn shares_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.storage, &other.storage)
    }

    /// Deep copy with storage trimmed to exactly this view.
    pub fn to_owned_tensor(&self) -> Self {
        Self { shape: self.shape.clone(), storage: Arc::new(self.data().to_vec()) }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.len() > MAX_AXES {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self { shape: shape.to_vec(), storage: Arc::clone(&self.storage) })
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Batched product over matching leading axes: `[.., m, k] x [.., k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (batch, m, k, n) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![0.0; batch * m * n];
        for b in 0..batch {
            kernels::matmul_nn(
                &self.data()[b * m * k..(b + 1) * m * k],
                &other.data()[b * k * n..(b + 1) * k * n],
                &mut out[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = self.shape[..self.shape.len() - 2].to_vec();
        shape.extend([m, n]);
        Tensor::new(&shape, out)
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let nd = self.shape.len();
        if nd < 2 {
            return Err(Error::Dimension("transpose needs at least two axes".into()));
        }
        let (r, c) = (self.shape[nd - 2], self.shape[nd - 1]);
        let batch = self.numel() / (r * c).max(1);
        let mut out = vec![0.0; self.numel()];
        for b in 0..batch {
            kernels::transpose(&self.data()[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c], r, c);
        }
        let mut shape = self.shape.clone();
        shape.swap(nd - 2, nd - 1);
        Tensor::new(&shape, out)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let w = *self.shape.last().unwrap_or(&1);
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(w.max(1)) {
            kernels::softmax_in_place(row);
        }
        Tensor { shape: self.shape.clone(), storage: Arc::new(out) }
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::Dimension(format!("cannot multiply shapes {a:?} and {b:?}")));
    }
    let nd = a.len();
    let (m, k) = (a[nd - 2], a[nd - 1]);
    let (k2, n) = (b[nd - 2], b[nd - 1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "inner dimensions differ: {a:?} x {b:?}"
        )));
    }
    let batch = a[..nd - 2].iter().product();
    Ok((batch, m, k, n))
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        if data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, data)
        } else {
            write!(f, "Tensor{:?} [{}, {}, ... {} values]", self.shape, data[0], data[1], data.len())
        }
    }
}
