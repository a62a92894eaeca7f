//! Hierarchical multimodal retrieval.
//!
//! Pages are chunked, embedded through pluggable providers, fused with
//! projected visual embeddings, and clustered level by level into a summary
//! tree. Queries are classified, routed by class entropy to one of three
//! retrieval strategies, and the per-band strategy preferences adapt from
//! feedback with an exponential moving average.
//!
//! The numeric modules are generic over [`Scalar`]; the index stores `f32`.

pub mod cluster;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod index;
pub mod lora;
pub mod pipeline;
pub mod controller;
pub mod providers;
pub mod retrieval;
pub mod scalar;
pub mod synth;
pub mod tree;

pub use error::{Error, ProviderError, Result};
pub use scalar::Scalar;

/// Embedding component type used by the index and on disk.
pub type Real = f32;
pub type Vector = Vec<Real>;
pub type FusedEmbedding = embedding::FusedEmbedding<Real>;
pub type ProjectionMatrix = embedding::ProjectionMatrix<Real>;
pub type TokenEmbeddingSet = embedding::TokenEmbeddingSet<Real>;
pub type ClusterAssignment = cluster::ClusterAssignment<Real>;
