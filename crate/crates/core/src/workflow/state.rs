use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseState {
    Intake,
    Formulated,
    Researched,
    Routed,
    Aggregated,
    AdvisorReview,
    Revise,
    ParalegalFinalize,
    Released,
    Abstained,
    Rejected,
}

impl CaseState {
    pub const ALL: [CaseState; 11] = [
        CaseState::Intake,
        CaseState::Formulated,
        CaseState::Researched,
        CaseState::Routed,
        CaseState::Aggregated,
        CaseState::AdvisorReview,
        CaseState::Revise,
        CaseState::ParalegalFinalize,
        CaseState::Released,
        CaseState::Abstained,
        CaseState::Rejected,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            CaseState::Released | CaseState::Abstained | CaseState::Rejected
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CaseState::Intake => "intake",
            CaseState::Formulated => "formulated",
            CaseState::Researched => "researched",
            CaseState::Routed => "routed",
            CaseState::Aggregated => "aggregated",
            CaseState::AdvisorReview => "advisor_review",
            CaseState::Revise => "revise",
            CaseState::ParalegalFinalize => "paralegal_finalize",
            CaseState::Released => "released",
            CaseState::Abstained => "abstained",
            CaseState::Rejected => "rejected",
        }
    }
}

impl fmt::Display for CaseState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseEvent {
    Formulate,
    Research,
    Abstain,
    Route,
    Aggregate,
    /// Every active expert failed on some question.
    ExpertsFailed,
    OpenReview,
    Approve,
    RequestRevision,
    Finalize,
    Withdraw,
}

impl CaseEvent {
    pub const ALL: [CaseEvent; 11] = [
        CaseEvent::Formulate,
        CaseEvent::Research,
        CaseEvent::Abstain,
        CaseEvent::Route,
        CaseEvent::Aggregate,
        CaseEvent::ExpertsFailed,
        CaseEvent::OpenReview,
        CaseEvent::Approve,
        CaseEvent::RequestRevision,
        CaseEvent::Finalize,
        CaseEvent::Withdraw,
    ];
}

impl fmt::Display for CaseEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

/// The only way a case changes state.
pub fn transition(from: CaseState, event: CaseEvent) -> Result<CaseState> {
    use CaseEvent as E;
    use CaseState as S;
    let to = match (from, event) {
        (S::Intake | S::Revise, E::Formulate) => S::Formulated,
        (S::Formulated, E::Research) => S::Researched,
        (S::Researched, E::Abstain) => S::Abstained,
        (S::Researched, E::Route) => S::Routed,
        (S::Researched | S::Routed, E::Aggregate) => S::Aggregated,
        (S::Routed, E::ExpertsFailed) => S::Revise,
        (S::Aggregated, E::OpenReview) => S::AdvisorReview,
        (S::Aggregated | S::AdvisorReview, E::Approve) => S::ParalegalFinalize,
        (S::Aggregated | S::AdvisorReview, E::RequestRevision) => S::Revise,
        (S::ParalegalFinalize, E::Finalize) => S::Released,
        (S::Revise, E::Withdraw) => S::Rejected,
        _ => {
            return Err(Error::IllegalTransition {
                from: from.to_string(),
                event: event.to_string(),
            })
        }
    };
    Ok(to)
}
