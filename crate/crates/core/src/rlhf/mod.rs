//! Reviewer feedback, rewards and policy updates for the gate.

mod feedback;
mod ppo;

pub use feedback::{
    compute_reward, map_qualitative, Component, ComponentScores, FeedbackRecord, QualitativeScale,
    RewardModel, RewardSignal,
};
pub use ppo::{
    clipped_surrogate, ppo_update, sample_action, should_update, surrogate_gradient,
    PolicyGradient, PolicyState, PpoConfig, Trajectory, UpdateReport,
};
