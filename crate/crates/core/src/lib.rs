//! Temporal QoS prediction from sparse user/service invocation logs.
//!
//! The pipeline ingests a sparse `n x m x T` QoS tensor, removes outliers with
//! an isolation forest, builds per-time-step node features (statistical
//! profiles, non-negative matrix factorization, autoencoder-compressed cosine
//! correlations), extracts spatial embeddings with a two-unit graph
//! convolution over the bipartite invocation graph, and regresses future QoS
//! values with a transformer-encoder variant over a sliding window of those
//! embeddings. Both learning stages train with the bounded-influence Cauchy
//! loss under AdamW.
//!
//! All numeric kernels are generic over the scalar type via [`Scalar`]
//! (`f32` or `f64`); the concrete aliases below pin the `f64` instantiation
//! used by the CLI and the experiment pipeline.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod gcmf;
pub mod graph;
pub mod numcore;
pub mod pte;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense row-major matrix over the default `f64` scalar.
pub type Mat = numcore::Matrix<f64>;
/// QoS tensor over the default `f64` scalar.
pub type Tensor = dataset::QosTensor<f64>;
/// Spatial-stage model over the default `f64` scalar.
pub type GcmfModel = gcmf::GcmfModel<f64>;
/// Temporal-stage model over the default `f64` scalar.
pub type PteModel = pte::PteModel<f64>;
