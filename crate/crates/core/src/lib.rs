pub mod config;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod eval;
pub mod generation;
mod http;
pub mod kg;
pub mod moe;
pub mod retriever;
pub mod rlhf;
pub mod scalar;
pub mod snapshot;
pub mod taxonomy;
pub mod workflow;

pub use error::{Error, Result};

/// Double-precision instantiations used by the service and the CLI.
pub type Vector = embedding::Vector<f64>;
pub type DocumentIndex = retriever::DocumentIndex<f64>;
pub type KgEmbeddings = kg::KgEmbeddings<f64>;
pub type GatingNetwork = moe::GatingNetwork<f64>;
pub type GatingDistribution = moe::GatingDistribution<f64>;
pub type ExpertRegistry = moe::ExpertRegistry<f64>;
pub type PolicyState = rlhf::PolicyState<f64>;
pub type Trajectory = rlhf::Trajectory<f64>;
pub type Case = workflow::Case<f64>;
