//! Sparse mixture-of-experts routing: linear-softmax gate, top-K selection,
//! isolated expert execution and gate-weighted aggregation.

mod experts;
mod gating;

pub use experts::{
    aggregate, execute, AggregatedOutput, Contribution, EchoHandler, ExecutionReport,
    ExpertFailure, ExpertHandler, ExpertInput, ExpertOutput, ExpertProfile, ExpertRegistry,
    ExpertResponse, ExpertSpec, GenerationHandler, HandlerKind, HandlerParams, TemplateHandler,
};
pub use gating::{
    gate, softmax, top_k, ExpertId, GatingDistribution, GatingNetwork, RoutingDecision,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub experts: usize,
    pub k: usize,
    pub renormalize: bool,
    /// Fresh gates draw parameters from `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            experts: 4,
            k: 2,
            renormalize: true,
            init_scale: 0.05,
            seed: 7,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.k == 0 {
            return Err(Error::Configuration(
                "moe needs at least one expert and k >= 1".into(),
            ));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Configuration(
                "init_scale must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}
