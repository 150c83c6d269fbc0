//! Desk-scale text embedding toolkit: a small bidirectional transformer
//! encoder with latent-attention pooling, two-stage contrastive training,
//! positive-aware hard-negative mining, retrieval/STS/classification
//! evaluation, and post-training compression.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); training
//! and persistence use the `f64` aliases below.

pub mod autodiff;
pub mod checkpoint;
pub mod compress;
pub mod curation;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod pooling;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ModelCheckpoint = checkpoint::Checkpoint<f64>;
