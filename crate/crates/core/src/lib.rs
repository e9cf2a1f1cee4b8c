//! Nested ("Matryoshka") decoder-only transformers.
//!
//! One universal model contains `g` nested granularities per block; any
//! per-layer mix of them is an extractable submodel. The crate covers the
//! full loop at desk scale: a small autodiff engine, the nested model, the
//! training strategies it is usually compared against, budgeted submodel
//! search, speculative decoding with a shared cache, consistency metrics,
//! retrieval with mismatched encoders, and scaling-law fitting.

pub mod cache;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod scaling;
pub mod search;
pub mod tensor;
pub mod train;

pub use cache::KvCache;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{LayerConfig, MatDecoderModel, ModelConfig};
pub use tensor::Tensor;
