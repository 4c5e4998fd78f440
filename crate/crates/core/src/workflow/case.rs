use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::state::{transition, CaseEvent, CaseState};
use super::template::TemplateStore;
use crate::embedding::{Embedder, Vector};
use crate::error::{Error, Result};
use crate::kg::Gazetteer;
use crate::kg::{KnowledgeGraph, Triple};
use crate::moe::{
    aggregate, execute, AggregatedOutput, ExpertFailure, ExpertInput, ExpertRegistry,
    GatingDistribution, GatingNetwork, MoeConfig, RoutingDecision,
};
use crate::retriever::{DocumentIndex, KgView, PreparedQuery, RetrievalConfig, RetrievalResult};
use crate::scalar::Scalar;
use crate::taxonomy::Role;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub role: Role,
    pub name: String,
}

impl Actor {
    pub fn new(role: Role, name: impl Into<String>) -> Self {
        Self {
            role,
            name: name.into(),
        }
    }

    /// An actor named after its role.
    pub fn system(role: Role) -> Self {
        Self::new(role, role.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub actor: Actor,
    pub event: CaseEvent,
    pub from: CaseState,
    pub to: CaseState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Approval {
    pub actor: Actor,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalDocument {
    pub case_id: String,
    pub text: String,
    pub citations: Vec<String>,
    pub advisor_approval: Approval,
    pub paralegal_signoff: Approval,
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct QuestionResearch<T> {
    pub question: String,
    pub vector: Vector<T>,
    pub entities: BTreeSet<String>,
    pub result: RetrievalResult<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct QuestionAnswer<T> {
    /// Index into the case's questions.
    pub question: usize,
    pub gate: GatingDistribution<T>,
    pub decision: RoutingDecision<T>,
    pub kg_context: Vec<Triple>,
    pub output: Option<AggregatedOutput<T>>,
    pub failures: Vec<ExpertFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Revise,
}

pub struct ResearchContext<'a, T: Scalar> {
    pub index: &'a DocumentIndex<T>,
    pub embedder: &'a dyn Embedder<T>,
    pub gazetteer: &'a Gazetteer,
    pub kg: KgView<'a, T>,
    pub config: &'a RetrievalConfig,
}

pub struct RoutingContext<'a, T: Scalar> {
    pub gate: &'a GatingNetwork<T>,
    pub registry: &'a ExpertRegistry<T>,
    pub moe: MoeConfig,
    pub graph: Option<&'a KnowledgeGraph>,
    /// KG facts handed to the experts per question.
    pub max_kg_facts: usize,
}

/// One client matter moving through intake, research, routing, review and
/// release. Every state change goes through [`transition`] and is appended
/// to `history`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Case<T> {
    pub id: String,
    pub objectives: String,
    pub questions: Vec<String>,
    state: CaseState,
    history: Vec<HistoryEntry>,
    pub research: Vec<QuestionResearch<T>>,
    pub answers: Vec<QuestionAnswer<T>>,
    pub aggregated: Option<String>,
    /// Body after advisor edits; starts equal to `aggregated`.
    pub reviewed: Option<String>,
    pub review_notes: Vec<String>,
    pub diagnostics: Vec<String>,
    pub advisor_approval: Option<Approval>,
    pub final_document: Option<FinalDocument>,
}

impl<T: Scalar> Case<T> {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            objectives: String::new(),
            questions: Vec::new(),
            state: CaseState::Intake,
            history: Vec::new(),
            research: Vec::new(),
            answers: Vec::new(),
            aggregated: None,
            reviewed: None,
            review_notes: Vec::new(),
            diagnostics: Vec::new(),
            advisor_approval: None,
            final_document: None,
        }
    }

    pub fn state(&self) -> CaseState {
        self.state
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    fn apply(
        &mut self,
        event: CaseEvent,
        actor: &Actor,
        note: Option<String>,
    ) -> Result<CaseState> {
        let to = transition(self.state, event)?;
        let now = Utc::now();
        let at = self.history.last().map_or(now, |h| h.at.max(now));
        self.history.push(HistoryEntry {
            seq: self.history.len() as u64 + 1,
            at,
            actor: actor.clone(),
            event,
            from: self.state,
            to,
            note,
        });
        self.state = to;
        Ok(to)
    }

    fn check_event(&self, event: CaseEvent) -> Result<()> {
        transition(self.state, event).map(|_| ())
    }

    fn require(actor: &Actor, role: Role) -> Result<()> {
        if actor.role != role {
            return Err(Error::Authorization {
                required: role.to_string(),
                actual: actor.role.to_string(),
            });
        }
        Ok(())
    }

    /// Splits objectives into one question per non-blank line.
    pub fn formulate(&mut self, actor: &Actor, objectives: &str) -> Result<&[String]> {
        self.check_event(CaseEvent::Formulate)?;
        let questions: Vec<String> = objectives
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        if questions.is_empty() {
            return Err(Error::Validation("objectives contain no questions".into()));
        }
        self.apply(CaseEvent::Formulate, actor, None)?;
        self.objectives = objectives.to_owned();
        self.questions = questions;
        self.research.clear();
        self.answers.clear();
        self.aggregated = None;
        self.reviewed = None;
        self.advisor_approval = None;
        Ok(&self.questions)
    }

    /// Retrieves supporting documents for every question. The case abstains
    /// only when every question abstains.
    pub fn research(
        &mut self,
        actor: &Actor,
        ctx: &ResearchContext<'_, T>,
    ) -> Result<&[QuestionResearch<T>]> {
        self.check_event(CaseEvent::Research)?;
        if ctx.index.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let mut research = Vec::with_capacity(self.questions.len());
        for q in &self.questions {
            let prepared = PreparedQuery::new(q, ctx.embedder, ctx.gazetteer)?;
            let result = ctx.index.retrieve_prepared(&prepared, ctx.config, ctx.kg)?;
            research.push(QuestionResearch {
                question: q.clone(),
                entities: prepared.links.entities(),
                vector: prepared.vector,
                result,
            });
        }
        let hits = research.iter().filter(|r| !r.result.abstained).count();
        self.research = research;
        self.apply(
            CaseEvent::Research,
            actor,
            Some(format!(
                "{hits}/{} questions supported",
                self.questions.len()
            )),
        )?;
        if hits == 0 {
            self.apply(
                CaseEvent::Abstain,
                actor,
                Some("no document cleared the relevance threshold".into()),
            )?;
        }
        Ok(&self.research)
    }

    /// Gates and routes each supported question, then joins the per-question
    /// answers in question order. If every active expert fails on some
    /// question the case moves to `Revise` and a routing error is returned.
    pub fn route_and_answer(&mut self, actor: &Actor, ctx: &RoutingContext<'_, T>) -> Result<&str> {
        self.check_event(CaseEvent::Route)?;
        if ctx.registry.len() != ctx.gate.experts() {
            return Err(Error::Configuration(format!(
                "gate has {} experts but {} are registered",
                ctx.gate.experts(),
                ctx.registry.len()
            )));
        }
        let mut answers = Vec::new();
        for (i, r) in self.research.iter().enumerate() {
            if r.result.abstained {
                continue;
            }
            let g = ctx.gate.gate(&r.vector)?;
            let decision = crate::moe::top_k(&g, ctx.moe.k, ctx.moe.renormalize)?;
            let mut touched = r.entities.clone();
            for d in &r.result.documents {
                touched.extend(d.entities.iter().cloned());
            }
            let kg_context: Vec<Triple> = match ctx.graph {
                Some(graph) => {
                    // Facts linking two question entities first, then those
                    // reaching a cited document's entities.
                    let rank = |t: &Triple| {
                        let q =
                            r.entities.contains(&t.head) as u8 + r.entities.contains(&t.tail) as u8;
                        let d = touched.contains(&t.head) as u8 + touched.contains(&t.tail) as u8;
                        std::cmp::Reverse((q, d))
                    };
                    let mut facts: Vec<Triple> = graph
                        .triples_touching(&touched)
                        .filter(|t| r.entities.contains(&t.head) || r.entities.contains(&t.tail))
                        .collect();
                    facts.sort_by_key(rank);
                    facts.truncate(ctx.max_kg_facts);
                    facts
                }
                None => Vec::new(),
            };
            let input = ExpertInput {
                question: &r.question,
                query_vector: &r.vector,
                documents: &r.result.documents,
                kg_context: &kg_context,
            };
            let report = execute(&decision, ctx.registry, &input)?;
            let output = if report.outputs.is_empty() {
                None
            } else {
                Some(aggregate(&g, &report.outputs, ctx.moe.renormalize)?)
            };
            answers.push(QuestionAnswer {
                question: i,
                gate: g,
                decision,
                kg_context,
                output,
                failures: report.failures,
            });
        }
        self.apply(CaseEvent::Route, actor, None)?;
        let failed: Vec<&QuestionAnswer<T>> =
            answers.iter().filter(|a| a.output.is_none()).collect();
        if !failed.is_empty() {
            let diagnostics: Vec<String> = failed
                .iter()
                .flat_map(|a| {
                    a.failures.iter().map(move |f| {
                        format!(
                            "question {}: {} failed: {}",
                            a.question + 1,
                            f.expert,
                            f.message
                        )
                    })
                })
                .collect();
            let note = diagnostics.join("; ");
            self.diagnostics.extend(diagnostics);
            self.answers = answers;
            self.apply(CaseEvent::ExpertsFailed, actor, Some(note.clone()))?;
            return Err(Error::Routing(format!("all experts failed: {note}")));
        }
        let body = answers
            .iter()
            .filter_map(|a| a.output.as_ref())
            .map(AggregatedOutput::render)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n\n");
        self.answers = answers;
        self.aggregated = Some(body.clone());
        self.reviewed = Some(body);
        self.apply(CaseEvent::Aggregate, actor, None)?;
        Ok(self.aggregated.as_deref().unwrap_or_default())
    }

    /// Distinct cited document ids across all answers, in first-seen order.
    pub fn citations(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for a in &self.answers {
            let Some(o) = &a.output else { continue };
            for s in o.sentences() {
                if let Some(src) = &s.source {
                    if !out.contains(src) {
                        out.push(src.clone());
                    }
                }
            }
        }
        out
    }

    pub fn open_review(&mut self, actor: &Actor) -> Result<CaseState> {
        self.apply(CaseEvent::OpenReview, actor, None)
    }

    /// Advisor verdict. `edited` replaces the body; `None` keeps it as is.
    pub fn advisor_review(
        &mut self,
        actor: &Actor,
        verdict: Verdict,
        notes: Option<String>,
        edited: Option<String>,
    ) -> Result<CaseState> {
        Self::require(actor, Role::Advisor)?;
        let event = match verdict {
            Verdict::Approve => CaseEvent::Approve,
            Verdict::Revise => CaseEvent::RequestRevision,
        };
        self.check_event(event)?;
        if let Some(n) = &notes {
            self.review_notes.push(n.clone());
        }
        match verdict {
            Verdict::Approve => {
                if let Some(body) = edited {
                    self.reviewed = Some(body);
                }
                self.advisor_approval = Some(Approval {
                    actor: actor.clone(),
                    at: Utc::now(),
                });
            }
            Verdict::Revise => self.advisor_approval = None,
        }
        self.apply(event, actor, notes)
    }

    pub fn paralegal_finalize(
        &mut self,
        actor: &Actor,
        template_id: &str,
        templates: &TemplateStore,
    ) -> Result<&FinalDocument> {
        Self::require(actor, Role::Paralegal)?;
        self.check_event(CaseEvent::Finalize)?;
        let approval = self
            .advisor_approval
            .clone()
            .ok_or_else(|| Error::Validation("case has no advisor approval".into()))?;
        let body = self.reviewed.clone().unwrap_or_default();
        let citations = self.citations();
        let text = templates.render(template_id, &body, &citations, &self.id)?;
        let at = Utc::now().max(approval.at);
        self.apply(
            CaseEvent::Finalize,
            actor,
            Some(format!("template {template_id}")),
        )?;
        self.final_document = Some(FinalDocument {
            case_id: self.id.clone(),
            text,
            citations,
            advisor_approval: approval,
            paralegal_signoff: Approval {
                actor: actor.clone(),
                at,
            },
            template_id: template_id.to_owned(),
        });
        Ok(self.final_document.as_ref().expect("just set"))
    }

    pub fn withdraw(&mut self, actor: &Actor, reason: Option<String>) -> Result<CaseState> {
        self.apply(CaseEvent::Withdraw, actor, reason)
    }
}

/// Rebuilds the final state from an event log, checking sequence numbers,
/// timestamps and every recorded `from`/`to` pair.
pub fn replay(history: &[HistoryEntry]) -> Result<CaseState> {
    let mut state = CaseState::Intake;
    let mut last: Option<&HistoryEntry> = None;
    for (i, h) in history.iter().enumerate() {
        if h.seq != i as u64 + 1 {
            return Err(Error::Validation(format!(
                "history entry {} has seq {}",
                i + 1,
                h.seq
            )));
        }
        if last.is_some_and(|l| l.at > h.at) {
            return Err(Error::Validation(format!(
                "history entry {} goes back in time",
                h.seq
            )));
        }
        if h.from != state {
            return Err(Error::Validation(format!(
                "history entry {} starts from {} but the case was {state}",
                h.seq, h.from
            )));
        }
        state = transition(state, h.event)?;
        if state != h.to {
            return Err(Error::Validation(format!(
                "history entry {} records {} but replays to {state}",
                h.seq, h.to
            )));
        }
        last = Some(h);
    }
    Ok(state)
}
