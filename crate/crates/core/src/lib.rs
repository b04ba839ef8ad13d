//! Concept-first open-vocabulary panoptic segmentation.
//!
//! A generative concept provider names the objects in an image, a
//! concept-aware visual enhancer fuses those concepts into the global visual
//! features, a shared-cross-attention decoder turns learnable queries into
//! masks, and regions are classified against text embeddings with optional
//! confidence reweighting. Everything trains and evaluates on deterministic
//! synthetic scenes.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file name the two concrete instantiations.

pub mod autograd;
pub mod cave;
pub mod cli;
pub mod concepts;
pub mod config;
pub mod data_synth;
pub mod decoder;
pub mod embedding;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type FeatureGrid32 = embedding::FeatureGrid<f32>;
pub type FeatureGrid64 = embedding::FeatureGrid<f64>;
pub type EmbeddingTable32 = embedding::CategoryEmbeddingTable<f32>;
pub type EmbeddingTable64 = embedding::CategoryEmbeddingTable<f64>;
