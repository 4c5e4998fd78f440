use std::sync::Arc;

use super::*;
use crate::embedding::{Embedder, HashEmbedder};
use crate::error::{Error, Result};
use crate::kg::{CaseFold, Gazetteer, GazetteerEntry, KnowledgeGraph, Triple};
use crate::moe::{
    EchoHandler, ExpertHandler, ExpertInput, ExpertProfile, ExpertRegistry, ExpertResponse,
    ExpertSpec, GatingNetwork, MoeConfig,
};
use crate::retriever::{DocumentIndex, FusionMode, KgView, NewDocument, RetrievalConfig};
use crate::taxonomy::Role;

const DOCS: [(&str, &str); 3] = [
    (
        "d1",
        "Statute X governs contract disputes. Courts apply it to written agreements.",
    ),
    (
        "d2",
        "The tenant may terminate the lease early. Notice must be given in writing.",
    ),
    (
        "d3",
        "Negligence requires a duty of care. Breach and damages must be shown.",
    ),
];

struct Fixture {
    embedder: Arc<dyn Embedder<f64>>,
    gazetteer: Gazetteer,
    index: DocumentIndex<f64>,
    graph: KnowledgeGraph,
    registry: ExpertRegistry<f64>,
    gate: GatingNetwork<f64>,
    templates: TemplateStore,
}

fn fixture() -> Fixture {
    let embedder: Arc<dyn Embedder<f64>> = Arc::new(HashEmbedder::default());
    let gazetteer = Gazetteer::new(
        vec![GazetteerEntry {
            entity_id: "Statute X".into(),
            aliases: vec!["statute x".into()],
        }],
        CaseFold::Lowercase,
    )
    .unwrap();
    let mut index = DocumentIndex::new(embedder.dim()).unwrap();
    for (id, text) in DOCS {
        index
            .add(
                NewDocument {
                    id: id.into(),
                    title: String::new(),
                    text: text.into(),
                    tags: Default::default(),
                },
                embedder.as_ref(),
                &gazetteer,
            )
            .unwrap();
    }
    let mut graph = KnowledgeGraph::default();
    graph
        .insert(&Triple::new("Statute X", "applies_to", "Contract Law"))
        .unwrap();
    let registry = ExpertRegistry::from_specs(&ExpertSpec::default_set(), &embedder).unwrap();
    let gate = GatingNetwork::zeros(4, embedder.dim()).unwrap();
    Fixture {
        embedder,
        gazetteer,
        index,
        graph,
        registry,
        gate,
        templates: TemplateStore::default(),
    }
}

fn retrieval(theta: f64) -> RetrievalConfig {
    RetrievalConfig {
        theta,
        fusion_mode: FusionMode::TextOnly,
        ..Default::default()
    }
}

fn research_ctx<'a>(f: &'a Fixture, cfg: &'a RetrievalConfig) -> ResearchContext<'a, f64> {
    ResearchContext {
        index: &f.index,
        embedder: f.embedder.as_ref(),
        gazetteer: &f.gazetteer,
        kg: KgView::Exact,
        config: cfg,
    }
}

fn routing_ctx(f: &Fixture) -> RoutingContext<'_, f64> {
    RoutingContext {
        gate: &f.gate,
        registry: &f.registry,
        moe: MoeConfig::default(),
        graph: Some(&f.graph),
        max_kg_facts: 5,
    }
}

fn consultant() -> Actor {
    Actor::system(Role::Consultant)
}
fn researcher() -> Actor {
    Actor::system(Role::Researcher)
}
fn advisor() -> Actor {
    Actor::new(Role::Advisor, "alex")
}
fn paralegal() -> Actor {
    Actor::new(Role::Paralegal, "pat")
}

/// Runs a case up to `Aggregated`.
fn aggregated_case(f: &Fixture, objectives: &str) -> Case<f64> {
    let cfg = retrieval(0.01);
    let mut c = Case::new("c1");
    c.formulate(&consultant(), objectives).unwrap();
    c.research(&researcher(), &research_ctx(f, &cfg)).unwrap();
    c.route_and_answer(&researcher(), &routing_ctx(f)).unwrap();
    c
}

#[test]
fn formulation_splits_lines() {
    let mut c = Case::<f64>::new("c");
    assert!(matches!(
        c.formulate(&consultant(), "  \n "),
        Err(Error::Validation(_))
    ));
    assert_eq!(c.state(), CaseState::Intake);
    let q = c
        .formulate(&consultant(), "First?\n\nSecond?\n  Third?  ")
        .unwrap();
    assert_eq!(q, ["First?", "Second?", "Third?"]);
    assert_eq!(c.state(), CaseState::Formulated);
    assert!(matches!(
        c.formulate(&consultant(), "Again?"),
        Err(Error::IllegalTransition { .. })
    ));
}

#[test]
fn research_outcomes() {
    let f = fixture();
    let hit = retrieval(0.01);
    let mut c = Case::new("all");
    c.formulate(&consultant(), "statute x contracts\nlease termination")
        .unwrap();
    c.research(&researcher(), &research_ctx(&f, &hit)).unwrap();
    assert_eq!(c.state(), CaseState::Researched);
    assert!(c.research.iter().all(|r| !r.result.abstained));

    let strict = retrieval(0.99);
    let mut c = Case::new("none");
    c.formulate(&consultant(), "weather tomorrow\nfootball scores")
        .unwrap();
    c.research(&researcher(), &research_ctx(&f, &strict))
        .unwrap();
    assert_eq!(c.state(), CaseState::Abstained);

    let mut c = Case::new("mixed");
    c.formulate(&consultant(), &format!("{}\nfootball scores", DOCS[0].1))
        .unwrap();
    c.research(&researcher(), &research_ctx(&f, &strict))
        .unwrap();
    assert_eq!(c.state(), CaseState::Researched);
    let flags: Vec<bool> = c.research.iter().map(|r| r.result.abstained).collect();
    assert_eq!(flags, [false, true]);
}

#[test]
fn empty_index_leaves_state_alone() {
    let mut f = fixture();
    f.index = DocumentIndex::new(f.embedder.dim()).unwrap();
    let cfg = retrieval(0.5);
    let mut c = Case::new("c");
    c.formulate(&consultant(), "anything").unwrap();
    assert!(matches!(
        c.research(&researcher(), &research_ctx(&f, &cfg)),
        Err(Error::EmptyIndex)
    ));
    assert_eq!(c.state(), CaseState::Formulated);
}

#[test]
fn single_question_answer_is_the_section() {
    let f = fixture();
    let c = aggregated_case(&f, "What supports statute x in contract disputes?");
    assert_eq!(c.state(), CaseState::Aggregated);
    let out = c.answers[0].output.as_ref().unwrap();
    assert_eq!(c.aggregated.as_deref().unwrap(), out.render());
    assert!(out
        .render()
        .contains("per KG: Statute X applies_to Contract Law"));
    assert!(!c.citations().is_empty());
}

#[test]
fn sections_follow_question_order() {
    let f = fixture();
    let c = aggregated_case(&f, "statute x contract disputes\nnegligence duty of care");
    let parts: Vec<String> = c
        .answers
        .iter()
        .map(|a| a.output.as_ref().unwrap().render())
        .collect();
    assert_eq!(
        c.answers.iter().map(|a| a.question).collect::<Vec<_>>(),
        [0, 1]
    );
    assert_eq!(c.aggregated.as_deref().unwrap(), parts.join("\n\n"));
}

struct Broken;

impl ExpertHandler<f64> for Broken {
    fn kind(&self) -> &str {
        "broken"
    }
    fn handle(&self, _: &ExpertProfile, _: &ExpertInput<'_, f64>) -> Result<ExpertResponse<f64>> {
        Err(Error::BackendUnreachable("down".into()))
    }
}

#[test]
fn all_experts_failing_sends_the_case_to_revise() {
    let mut f = fixture();
    let mut reg = ExpertRegistry::new();
    for (i, role) in Role::ALL.into_iter().enumerate() {
        reg.register(ExpertProfile::for_role(i + 1, role), Box::new(Broken))
            .unwrap();
    }
    f.registry = reg;
    let cfg = retrieval(0.01);
    let mut c = Case::new("c");
    c.formulate(&consultant(), "statute x").unwrap();
    c.research(&researcher(), &research_ctx(&f, &cfg)).unwrap();
    let r = c.route_and_answer(&researcher(), &routing_ctx(&f));
    assert!(matches!(r, Err(Error::Routing(_))));
    assert_eq!(c.state(), CaseState::Revise);
    assert_eq!(c.diagnostics.len(), 2);
    c.formulate(&consultant(), "statute x again").unwrap();
    assert_eq!(c.state(), CaseState::Formulated);
}

#[test]
fn one_failing_expert_is_tolerated() {
    let mut f = fixture();
    let mut reg = ExpertRegistry::new();
    reg.register(
        ExpertProfile::for_role(1, Role::Consultant),
        Box::new(Broken),
    )
    .unwrap();
    for (i, role) in Role::ALL.into_iter().enumerate().skip(1) {
        reg.register(ExpertProfile::for_role(i + 1, role), Box::new(EchoHandler))
            .unwrap();
    }
    f.registry = reg;
    let c = aggregated_case(&f, "statute x");
    assert_eq!(c.answers[0].failures.len(), 1);
    assert_eq!(c.answers[0].output.as_ref().unwrap().contributions.len(), 1);
}

#[test]
fn advisor_verdicts() {
    let f = fixture();
    let mut c = aggregated_case(&f, "statute x");
    assert!(matches!(
        c.advisor_review(&paralegal(), Verdict::Approve, None, None),
        Err(Error::Authorization { .. })
    ));
    assert_eq!(c.state(), CaseState::Aggregated);
    c.advisor_review(
        &advisor(),
        Verdict::Revise,
        Some("cite more cases".into()),
        None,
    )
    .unwrap();
    assert_eq!(c.state(), CaseState::Revise);
    assert_eq!(c.review_notes, ["cite more cases"]);
    assert_eq!(c.history().last().unwrap().actor, advisor());

    let mut c = aggregated_case(&f, "statute x");
    c.open_review(&researcher()).unwrap();
    c.advisor_review(&advisor(), Verdict::Approve, None, None)
        .unwrap();
    assert_eq!(c.state(), CaseState::ParalegalFinalize);
}

#[test]
fn finalization() {
    let f = fixture();
    let mut c = aggregated_case(&f, "statute x");
    assert!(matches!(
        c.paralegal_finalize(&paralegal(), "default", &f.templates),
        Err(Error::IllegalTransition { .. })
    ));
    c.advisor_review(&advisor(), Verdict::Approve, None, None)
        .unwrap();
    assert!(matches!(
        c.paralegal_finalize(&advisor(), "default", &f.templates),
        Err(Error::Authorization { .. })
    ));
    assert!(matches!(
        c.paralegal_finalize(&paralegal(), "nope", &f.templates),
        Err(Error::Template(_))
    ));
    assert_eq!(c.state(), CaseState::ParalegalFinalize);
    assert!(c.final_document.is_none());
    let doc = c
        .paralegal_finalize(&paralegal(), "default", &f.templates)
        .unwrap()
        .clone();
    assert_eq!(c.state(), CaseState::Released);
    assert_eq!(doc.advisor_approval.actor, advisor());
    assert_eq!(doc.paralegal_signoff.actor, paralegal());
    assert!(doc.paralegal_signoff.at >= doc.advisor_approval.at);
    assert!(doc.text.contains("Case: c1"));
    assert!(matches!(
        c.paralegal_finalize(&paralegal(), "default", &f.templates),
        Err(Error::IllegalTransition { .. })
    ));
}

#[test]
fn identity_reviewers_preserve_the_aggregate() {
    let f = fixture();
    let mut c = aggregated_case(&f, "statute x contract disputes\nlease notice in writing");
    let aggregated = c.aggregated.clone().unwrap();
    c.open_review(&researcher()).unwrap();
    c.advisor_review(&advisor(), Verdict::Approve, None, None)
        .unwrap();
    let doc = c
        .paralegal_finalize(&paralegal(), "body-only", &f.templates)
        .unwrap();
    assert_eq!(doc.text, aggregated);
}

#[test]
fn advisor_edits_replace_the_body() {
    let f = fixture();
    let mut c = aggregated_case(&f, "statute x");
    c.advisor_review(&advisor(), Verdict::Approve, None, Some("Edited.".into()))
        .unwrap();
    let doc = c
        .paralegal_finalize(&paralegal(), "body-only", &f.templates)
        .unwrap();
    assert_eq!(doc.text, "Edited.");
}

#[test]
fn history_replays_to_the_current_state() {
    let f = fixture();
    let mut c = aggregated_case(&f, "statute x");
    c.advisor_review(&advisor(), Verdict::Revise, None, None)
        .unwrap();
    c.formulate(&consultant(), "statute x contract").unwrap();
    c.research(&researcher(), &research_ctx(&f, &retrieval(0.01)))
        .unwrap();
    c.route_and_answer(&researcher(), &routing_ctx(&f)).unwrap();
    c.advisor_review(&advisor(), Verdict::Approve, None, None)
        .unwrap();
    c.paralegal_finalize(&paralegal(), "default", &f.templates)
        .unwrap();
    assert_eq!(replay(c.history()).unwrap(), c.state());
    assert!(c
        .history()
        .windows(2)
        .all(|w| w[0].seq < w[1].seq && w[0].at <= w[1].at));

    let mut tampered = c.history().to_vec();
    tampered.remove(3);
    assert!(replay(&tampered).is_err());

    let json = serde_json::to_string(&c).unwrap();
    let back: Case<f64> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, c);
}

#[test]
fn withdrawal_from_revise() {
    let f = fixture();
    let mut c = aggregated_case(&f, "statute x");
    assert!(c.withdraw(&consultant(), None).is_err());
    c.advisor_review(&advisor(), Verdict::Revise, None, None)
        .unwrap();
    assert_eq!(
        c.withdraw(&consultant(), Some("client dropped it".into()))
            .unwrap(),
        CaseState::Rejected
    );
    assert!(c.final_document.is_none());
}
