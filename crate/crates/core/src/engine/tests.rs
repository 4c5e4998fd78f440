use std::path::PathBuf;

use super::*;
use crate::rlhf::{ComponentScores, FeedbackRecord};

const EXAMPLE: &str =
    "What precedent cases support the application of statute X in contract disputes?";

fn fixture_config() -> Config {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/config.toml");
    let mut cfg = Config::load(&path).unwrap();
    cfg.service.journal = None;
    cfg.service.snapshot = None;
    cfg
}

fn engine() -> Engine {
    let e = Engine::new(fixture_config()).unwrap();
    e.load_data_files().unwrap();
    e
}

fn advisor() -> Actor {
    Actor::new(Role::Advisor, "ada")
}

fn paralegal() -> Actor {
    Actor::new(Role::Paralegal, "pat")
}

fn rating(case_id: &str, role: Role, v: f64) -> FeedbackRecord {
    FeedbackRecord::numeric(case_id, case_id, role, ComponentScores::new(v, v, v, v))
}

#[test]
fn fixture_corpus_loads() {
    let e = engine();
    let m = e.metrics();
    assert_eq!(m.documents, 12);
    assert_eq!(m.triples, 16);
    assert_eq!(m.policy_version, 0);
    assert_eq!(e.experts().len(), 4);
}

#[test]
fn example_query_is_answered_with_citations() {
    let e = engine();
    let out = e
        .query(EXAMPLE, &Actor::new(Role::Consultant, "c"))
        .unwrap();
    assert!(!out.abstained);
    assert_eq!(out.state, CaseState::AdvisorReview);
    assert!(out.answer.as_deref().unwrap().contains("Statute X"));
    assert!(out.citations.contains(&"doc-01".to_string()));
    let gate = out.gate.unwrap();
    assert!((gate.g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(gate.active.len(), 2);
    assert_eq!(out.case_id, "case-000001");
}

#[test]
fn off_topic_query_abstains() {
    let e = engine();
    let out = e
        .query("zzqx vvkj wwpf", &Actor::new(Role::Consultant, "c"))
        .unwrap();
    assert!(out.abstained);
    assert_eq!(out.state, CaseState::Abstained);
    assert!(out.answer.is_none());
    assert_eq!(e.metrics().abstention_rate_window, Some(1.0));
}

#[test]
fn empty_index_is_an_error() {
    let e = Engine::new(fixture_config()).unwrap();
    assert!(matches!(
        e.query(EXAMPLE, &advisor()),
        Err(Error::EmptyIndex)
    ));
}

#[test]
fn review_and_finalize_flow() {
    let e = engine();
    let out = e.query(EXAMPLE, &advisor()).unwrap();
    assert_eq!(e.review_queue(Some(Role::Advisor)).len(), 1);
    assert!(e.review_queue(Some(Role::Paralegal)).is_empty());
    let case = e
        .review(&out.case_id, &advisor(), Verdict::Approve, None, None)
        .unwrap();
    assert_eq!(case.state(), CaseState::ParalegalFinalize);
    assert_eq!(e.review_queue(Some(Role::Paralegal)).len(), 1);
    let doc = e
        .finalize(&out.case_id, &paralegal(), Some("memo"))
        .unwrap();
    assert!(doc.text.starts_with("MEMORANDUM"));
    assert!(doc.text.contains(out.answer.as_deref().unwrap()));
    assert_eq!(e.case(&out.case_id).unwrap().state(), CaseState::Released);
    assert!(e.review_queue(None).is_empty());
}

#[test]
fn review_by_wrong_role_is_refused() {
    let e = engine();
    let out = e.query(EXAMPLE, &advisor()).unwrap();
    let err = e
        .review(&out.case_id, &paralegal(), Verdict::Approve, None, None)
        .unwrap_err();
    assert!(matches!(err, Error::Authorization { .. }));
    assert!(matches!(e.case("case-999999"), Err(Error::NotFound(_))));
}

#[test]
fn feedback_buffers_until_forced() {
    let e = engine();
    let out = e.query(EXAMPLE, &advisor()).unwrap();
    let r = e
        .submit_feedback(rating(&out.case_id, Role::Advisor, 0.75))
        .unwrap();
    assert!((r.reward - 0.75).abs() < 1e-12);
    assert_eq!(r.trajectories, 1);
    assert_eq!(r.buffered, 1);
    assert!(r.update.is_none());
    assert_eq!(e.update_policy(false).unwrap(), None);
    let u = e.update_policy(true).unwrap().unwrap();
    assert_eq!(u.version, 1);
    let m = e.metrics();
    assert_eq!(m.policy_version, 1);
    assert_eq!(m.buffered, 0);
    assert_eq!(m.n_feedback, 1);
    assert_eq!(m.mean_reward, Some(0.75));
}

#[test]
fn consultant_feedback_is_rejected() {
    let e = engine();
    let out = e.query(EXAMPLE, &advisor()).unwrap();
    let err = e
        .submit_feedback(rating(&out.case_id, Role::Consultant, 1.0))
        .unwrap_err();
    assert!(matches!(err, Error::Authorization { .. }));
    assert!(matches!(
        e.submit_feedback(rating("case-404404", Role::Advisor, 1.0)),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn automatic_update_at_threshold() {
    let mut cfg = fixture_config();
    cfg.ppo.batch_threshold = 3;
    cfg.ppo.allow_any_batch = true;
    let e = Engine::new(cfg).unwrap();
    e.load_data_files().unwrap();
    let mut last = None;
    for i in 0..3 {
        let out = e.query(EXAMPLE, &advisor()).unwrap();
        last = e
            .submit_feedback(rating(&out.case_id, Role::Paralegal, 0.25 * i as f64))
            .unwrap()
            .update;
    }
    assert_eq!(last.unwrap().batch_size, 3);
    assert_eq!(e.metrics().policy_version, 1);
}

#[test]
fn gazetteer_growth_relinks_documents() {
    let e = engine();
    let before = e.index().get("doc-07").unwrap().links.entities();
    e.extend_gazetteer(vec![GazetteerEntry {
        entity_id: "personal_injury".into(),
        aliases: vec!["personal injury".into()],
    }])
    .unwrap();
    let after = e.index().get("doc-07").unwrap().links.entities();
    assert!(!before.contains("personal_injury"));
    assert!(after.contains("personal_injury"));
}

#[test]
fn kg_training_switches_to_embedded_view() {
    let e = engine();
    assert!(matches!(e.kg().view(), KgView::Exact));
    e.train_kg(None).unwrap();
    assert!(matches!(e.kg().view(), KgView::Embedded(_)));
    e.ingest_triples(vec![Triple::new("statute_y", "amends", "statute_x")])
        .unwrap();
    assert!(matches!(e.kg().view(), KgView::Exact));
}

#[test]
fn failed_ingest_leaves_index_untouched() {
    let e = engine();
    let docs = vec![
        NewDocument {
            id: "doc-13".into(),
            title: String::new(),
            text: "A new document.".into(),
            tags: Default::default(),
        },
        NewDocument {
            id: "doc-01".into(),
            title: String::new(),
            text: "Duplicate id.".into(),
            tags: Default::default(),
        },
    ];
    assert!(e.ingest_documents(docs).is_err());
    assert_eq!(e.index().len(), 12);
}

#[test]
fn snapshot_round_trip_preserves_everything() {
    let e = engine();
    e.train_kg(None).unwrap();
    let out = e.query(EXAMPLE, &advisor()).unwrap();
    e.review(&out.case_id, &advisor(), Verdict::Approve, None, None)
        .unwrap();
    e.submit_feedback(rating(&out.case_id, Role::Advisor, 1.0))
        .unwrap();
    e.update_policy(true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.snap");
    e.save_snapshot(&path).unwrap();
    let back = Engine::load_snapshot(fixture_config(), &path).unwrap();
    assert_eq!(back.snapshot(), e.snapshot());
    let q = "notice before termination for breach";
    assert_eq!(back.answer(q, None).unwrap(), e.answer(q, None).unwrap());
    assert_eq!(
        back.case(&out.case_id).unwrap(),
        e.case(&out.case_id).unwrap()
    );
    let next = back.query(EXAMPLE, &advisor()).unwrap();
    assert_eq!(next.case_id, "case-000002");
}

#[test]
fn gate_training_learns_labelled_routes() {
    let mut cfg = fixture_config();
    cfg.ppo.learning_rate = 0.5;
    cfg.ppo.allow_any_batch = true;
    let e = Engine::new(cfg).unwrap();
    let examples: Vec<(String, ExpertId)> = vec![
        (
            "client intake interview about a new matter".into(),
            ExpertId(1),
        ),
        ("search precedent case law research".into(), ExpertId(2)),
        (
            "draft the contract clause and file documents".into(),
            ExpertId(3),
        ),
        ("advise on litigation strategy and risk".into(), ExpertId(4)),
    ];
    let log = e.train_gate(&examples, 40, 64, 3).unwrap();
    assert_eq!(log.len(), 40);
    let policy = e.policy();
    for (text, id) in &examples {
        let v = crate::embedding::embed(text, e.embedder().as_ref()).unwrap();
        assert_eq!(policy.gate.gate(&v).unwrap().argmax(), *id, "{text}");
    }
}

#[test]
fn eval_pipeline_strips_kg_lines() {
    let e = engine();
    let p = EnginePipeline {
        engine: &e,
        first_sentence: false,
    };
    let rec = EvalRecord {
        id: "q1".into(),
        input: EXAMPLE.into(),
        references: vec![],
        label: Some("x".into()),
        docs: None,
    };
    let pred = p.predict(&rec).unwrap();
    assert!(!pred.abstained);
    assert!(!pred.text.contains("per KG:"));
}

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

#[test]
fn verbatim_qa_fixture_scores_full_accuracy() {
    let e = engine();
    let task = crate::eval::EvalTask::new(Task::QuestionAnswering, None, fixture("eval/qa.jsonl"))
        .unwrap();
    let records = task.load().unwrap();
    assert_eq!(records.len(), 10);
    let p = EnginePipeline {
        engine: &e,
        first_sentence: true,
    };
    let a = crate::eval::run_eval(&task, &records, &p).unwrap();
    assert_eq!(a.score, Some(1.0));
    assert_eq!(a.abstention_rate, 0.0);
    let b = crate::eval::run_eval(&task, &records, &p).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rouge_fixture_runs() {
    let e = engine();
    let task =
        crate::eval::EvalTask::new(Task::CasesIdentification, None, fixture("eval/rouge.jsonl"))
            .unwrap();
    let records = task.load().unwrap();
    let p = EnginePipeline {
        engine: &e,
        first_sentence: false,
    };
    let r = crate::eval::run_eval(&task, &records, &p).unwrap();
    assert_eq!(r.n, 5);
    assert!(r.score.unwrap() > 0.0);
}
