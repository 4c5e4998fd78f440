//! Case lifecycle: consultant intake, research, expert routing, advisor
//! review and paralegal release.

mod case;
mod state;
mod template;

pub use case::{
    replay, Actor, Approval, Case, FinalDocument, HistoryEntry, QuestionAnswer, QuestionResearch,
    ResearchContext, RoutingContext, Verdict,
};
pub use state::{transition, CaseEvent, CaseState};
pub use template::TemplateStore;

#[cfg(test)]
mod tests;
