//! Block-skimming transformer QA at desk scale.
//!
//! A miniature BERT-style encoder answers extractive questions while a
//! small CNN per layer reads the encoder's own attention maps and
//! predicts which context blocks still matter. Irrelevant blocks are
//! dropped mid-stack at inference, shrinking sequence length layer by
//! layer; training is joint (QA loss plus per-layer block relevance
//! losses) with nothing dropped. FLOPs accounting and an analytical
//! speedup model quantify the savings.
//!
//! Numeric kernels are generic over the scalar type ([`scalar::Scalar`],
//! f32 or f64); the aliases below pin the default double precision used
//! by every model-level module and tolerance.

pub mod analysis;
pub mod blockskim;
pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Tensor;

/// Default scalar type for model math.
pub type Scalar = f64;
/// Autodiff graph at default precision.
pub type Graph = numerics::Graph<Scalar>;
/// Dense tensor storage at default precision.
pub type TensorData = numerics::TensorData<Scalar>;
/// Adam state at default precision.
pub type AdamState = numerics::AdamState<Scalar>;
/// Adam hyper-parameters at default precision.
pub type AdamConfig = numerics::AdamConfig<Scalar>;
