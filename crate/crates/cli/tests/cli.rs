use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const EXAMPLE: &str = "What precedent cases support the application of statute X in contract disputes?";

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").canonicalize().unwrap()
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).to_string_lossy().into_owned()
}

/// Runs the binary in `dir` with NO_COLOR set and no inherited config.
fn lexmoe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexmoe"))
        .args(args)
        .current_dir(dir)
        .env("NO_COLOR", "1")
        .env_remove("LEXMOE_CONFIG")
        .env_remove("LEXMOE_STATE")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Fixture config copied next to a scratch state directory.
struct Scratch {
    dir: tempfile::TempDir,
}

impl Scratch {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        lexmoe(self.path(), args)
    }

    fn config(&self) -> String {
        fx("config.toml")
    }
}

/// Success invocation for every subcommand except `serve`.
fn success_cases(s: &Scratch) -> Vec<Vec<String>> {
    let c = s.config();
    let out = s.path().join("r.json").to_string_lossy().into_owned();
    let snap = s.path().join("x.snap").to_string_lossy().into_owned();
    let v = |a: &[&str]| a.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    vec![
        v(&["ingest-docs", &fx("docs.jsonl")]),
        v(&["ingest-triples", &fx("triples.tsv")]),
        v(&["ingest-gazetteer", &fx("gazetteer.json")]),
        v(&["--config", &c, "train-kg", "--epochs", "5"]),
        v(&["--config", &c, "train-gate", &fx("routing.jsonl"), "--rounds", "2"]),
        v(&["--config", &c, "query", EXAMPLE]),
        v(&["--config", &c, "eval", "--task", "rouge-fixture", "--out", &out]),
        v(&["--config", &c, "snapshot", "save", &snap]),
        v(&["--config", &c, "snapshot", "load", &snap]),
    ]
}

#[test]
fn ingest_docs_reports_fixture_count() {
    let s = Scratch::new();
    let o = s.run(&["ingest-docs", &fx("docs.jsonl")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "ingested 12 documents");
}

#[test]
fn example_query_prints_answer_citations_and_gate() {
    let s = Scratch::new();
    let o = s.run(&["--config", &s.config(), "query", EXAMPLE]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("answer:"), "{text}");
    assert!(text.contains("Statute X"));
    assert!(text.contains("citations:"));
    assert!(text.contains("doc-01"));
    assert!(text.contains("gate (policy v0)"));
    assert_eq!(text.matches("* expert").count(), 2, "{text}");
}

#[test]
fn every_subcommand_succeeds_and_emits_json() {
    let s = Scratch::new();
    for args in success_cases(&s) {
        let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
        a.insert(0, "--json");
        let o = s.run(&a);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        let v: serde_json::Value =
            serde_json::from_str(stdout(&o).trim()).unwrap_or_else(|e| panic!("{args:?}: {e}: {}", stdout(&o)));
        assert!(v.is_object(), "{args:?}");
    }
}

#[test]
fn quiet_suppresses_output() {
    let s = Scratch::new();
    for args in success_cases(&s) {
        let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
        a.push("--quiet");
        let o = s.run(&a);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        assert!(stdout(&o).is_empty(), "{args:?}: {}", stdout(&o));
    }
}

#[test]
fn help_and_config_flag_on_every_subcommand() {
    let s = Scratch::new();
    let subs: &[&[&str]] = &[
        &["ingest-docs"],
        &["ingest-triples"],
        &["ingest-gazetteer"],
        &["train-kg"],
        &["train-gate"],
        &["query"],
        &["eval"],
        &["serve"],
        &["snapshot"],
        &["snapshot", "save"],
        &["snapshot", "load"],
    ];
    for sub in subs {
        let mut a = sub.to_vec();
        a.push("--help");
        let o = s.run(&a);
        assert_eq!(code(&o), 0, "{sub:?}");
        let help = stdout(&o);
        assert!(help.contains("--config"), "{sub:?} help lacks --config");
        assert!(!help.contains('\x1b'), "color escape despite NO_COLOR");
    }
    assert_eq!(code(&s.run(&["--version"])), 0);
}

#[test]
fn user_errors_exit_one() {
    let s = Scratch::new();
    let c = s.config();
    let missing = s.path().join("missing.jsonl").to_string_lossy().into_owned();
    let bad = s.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json\n").unwrap();
    let bad = bad.to_string_lossy().into_owned();
    let (docs, routes, qa) = (fx("docs.jsonl"), fx("routing.jsonl"), fx("eval/qa.jsonl"));
    let cases: Vec<Vec<&str>> = vec![
        vec!["ingest-docs", "--bogus", "x"],
        vec!["frobnicate"],
        vec![],
        vec!["ingest-docs", &missing],
        vec!["ingest-docs", &bad],
        vec!["ingest-triples", &missing],
        vec!["ingest-gazetteer", &missing],
        vec!["--config", &missing, "query", EXAMPLE],
        vec!["--config", &c, "ingest-docs", &docs],
        vec!["train-kg"],
        vec!["--config", &c, "train-kg", "--epochs", "0"],
        vec!["--config", &c, "train-gate", &missing],
        vec!["--config", &c, "train-gate", &routes, "--batch", "8"],
        vec!["query", EXAMPLE],
        vec!["--config", &c, "query", EXAMPLE, "--theta", "2.5"],
        vec!["--config", &c, "eval", "--task", "no-such-task", "--data", &qa],
        vec!["--config", &c, "eval", "--task", "question-answering"],
        vec!["--config", &c, "eval", "--task", "question-answering", "--data", &qa, "--metric", "bleu"],
        vec!["--config", &c, "serve", "--bind", "not an address"],
        vec!["snapshot", "load", &missing],
        vec!["snapshot", "load", &bad],
    ];
    for args in cases {
        let o = s.run(&args);
        assert_eq!(code(&o), 1, "{args:?}: stdout {} stderr {}", stdout(&o), stderr(&o));
        assert!(!stderr(&o).is_empty(), "{args:?}");
        assert!(!stderr(&o).contains('\x1b'), "{args:?}");
    }
}

#[test]
fn internal_errors_exit_two() {
    let s = Scratch::new();
    let blocker = s.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out = blocker.join("report.json").to_string_lossy().into_owned();
    let o = s.run(&["--config", &s.config(), "eval", "--task", "rouge-fixture", "--out", &out]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn state_file_accumulates_across_runs() {
    let s = Scratch::new();
    let state = s.path().join("state/engine.snap").to_string_lossy().into_owned();
    let o = s.run(&["--state", &state, "ingest-gazetteer", &fx("gazetteer.json")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = s.run(&["--state", &state, "ingest-triples", &fx("triples.tsv")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = s.run(&["--state", &state, "ingest-docs", &fx("docs.jsonl")]);
    assert_eq!(stdout(&o).trim(), "ingested 12 documents");
    // Same ids again: rejected, state unchanged.
    assert_eq!(code(&s.run(&["--state", &state, "ingest-docs", &fx("docs.jsonl")])), 1);
    let c = s.config();
    let o = s.run(&["--json", "--config", &c, "--state", &state, "query", EXAMPLE]);
    let first: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(first["case_id"], "case-000001");
    assert_eq!(first["abstained"], false);
    let o = s.run(&["--json", "--config", &c, "--state", &state, "query", EXAMPLE]);
    let second: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(second["case_id"], "case-000002");
    assert_eq!(first["answer"], second["answer"]);
    let o = s.run(&["--json", "--state", &state, "snapshot", "load", &state]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["metrics"]["documents"], 12);
    assert_eq!(v["metrics"]["cases"], 2);
}

#[test]
fn eval_fixture_writes_report() {
    let s = Scratch::new();
    let o = s.run(&["--config", &s.config(), "eval", "--task", "rouge-fixture"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metric"], "rouge_l");
    assert_eq!(report["n"], 5);
    assert_eq!(report["pairs"].as_array().unwrap().len(), 5);

    let o = s.run(&["--json", "--config", &s.config(), "eval", "--task", "qa-fixture", "--out", "qa.json"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["score"], 1.0);
    assert_eq!(v["abstention_rate"], 0.0);
}

#[test]
fn gate_training_reaches_the_labels() {
    let s = Scratch::new();
    let o = s.run(&["--json", "--config", &s.config(), "train-gate", &fx("routing.jsonl")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["updates"], 30);
    assert_eq!(v["policy_version"], 30);
    assert_eq!(v["train_accuracy"], 1.0);
}

#[test]
fn serve_reports_bind_failure() {
    let s = Scratch::new();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let o = s.run(&["--config", &s.config(), "serve", "--bind", &addr]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("cannot bind"));
}
