//! Few-shot summarization in two phases: multi-task pre-training of a
//! prefix-equipped encoder-decoder transformer, then frozen-backbone
//! prefix-tuning on unseen tasks — plus a seeded k-shot benchmark harness
//! and a self-contained ROUGE evaluation suite.
//!
//! The numeric core is generic over the scalar type (f32/f64 via
//! num-traits); the type aliases below pin the shipped f64 pipeline.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod model;
pub mod rouge;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod tune;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Shipped pipelines run in f64 end to end.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Graph = tensor::Graph<Real>;
pub type ParameterStore = model::ParameterStore<Real>;
pub type PrefixParams = model::PrefixParams<Real>;
pub type PrefixBank = model::PrefixBank<Real>;
pub type TrainState = train::TrainState<Real>;
