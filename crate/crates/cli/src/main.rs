//! `lexmoe`: operator CLI.
//!
//! Exit codes: 0 success, 1 user error (bad flags, missing or invalid input),
//! 2 internal error.

use std::io::{BufRead, BufReader, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ColorChoice, Parser, Subcommand, ValueEnum};
use lexmoe_core::config::Config;
use lexmoe_core::engine::{Engine, EnginePipeline, QueryOutcome};
use lexmoe_core::eval::{parse_eval_jsonl, run_eval, EvalTask, MetricReport};
use lexmoe_core::kg::{hits_at_k, Gazetteer};
use lexmoe_core::moe::ExpertId;
use lexmoe_core::retriever::parse_documents_jsonl;
use lexmoe_core::taxonomy::{MetricKind, Role, Task};
use lexmoe_core::workflow::Actor;
use lexmoe_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "lexmoe", version, about = "Legal question answering with retrieval, expert routing and feedback training")]
struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true, env = "LEXMOE_CONFIG")]
    config: Option<PathBuf>,

    /// Engine state file. Loaded when present and rewritten after commands
    /// that change the engine. Without it every run starts from the
    /// configuration's data files and nothing is kept.
    #[arg(long, global = true, env = "LEXMOE_STATE")]
    state: Option<PathBuf>,

    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Add documents from a JSONL file ({id, title?, text, tags?} per line).
    IngestDocs { path: PathBuf },
    /// Add knowledge graph triples from a TSV file (head, relation, tail).
    IngestTriples { path: PathBuf },
    /// Add entity aliases from a JSON gazetteer and relink documents.
    IngestGazetteer { path: PathBuf },
    /// Train TransE embeddings on the current graph.
    TrainKg {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        epochs: Option<u64>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the gate with PPO against labelled routes ({text, expert} per line).
    TrainGate {
        path: PathBuf,
        #[arg(long, default_value_t = 30)]
        rounds: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        /// PPO learning rate; defaults to the configured one.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Answer a query (one question per line) and report citations and routing.
    Query {
        text: String,
        /// Similarity threshold override.
        #[arg(long)]
        theta: Option<f64>,
        /// Number of active experts override.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score the pipeline on an evaluation set.
    Eval {
        /// Task name, or `rouge-fixture` / `qa-fixture` for the bundled sets.
        #[arg(long)]
        task: String,
        /// Dataset (JSONL); the fixture aliases supply their own.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        metric: Option<Metric>,
        /// Report destination.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Write or read engine snapshots.
    Snapshot {
        #[command(subcommand)]
        action: SnapshotAction,
    },
}

#[derive(Debug, Subcommand)]
enum SnapshotAction {
    /// Save the current engine to a file.
    Save { path: PathBuf },
    /// Verify a snapshot and, with --state, adopt it as the state.
    Load { path: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Metric {
    Accuracy,
    RougeL,
    F1,
    Bleu,
}

impl From<Metric> for MetricKind {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Accuracy => MetricKind::Accuracy,
            Metric::RougeL => MetricKind::RougeL,
            Metric::F1 => MetricKind::F1,
            Metric::Bleu => MetricKind::Bleu,
        }
    }
}

#[derive(Debug)]
enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::NotFound) => CliError::User(e.to_string()),
            _ if e.is_user_error() => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

struct Output {
    json: bool,
    quiet: bool,
}

impl Output {
    /// Prints `value` as JSON, or `human` unless quiet.
    fn emit(&self, value: serde_json::Value, human: impl FnOnce() -> String) -> CliResult<()> {
        let mut out = std::io::stdout().lock();
        let r = if self.json {
            writeln!(out, "{value}")
        } else if self.quiet {
            Ok(())
        } else {
            writeln!(out, "{}", human())
        };
        r.map_err(|e| CliError::Internal(format!("stdout: {e}")))
    }
}

fn color_allowed() -> bool {
    std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty())
}

fn main() -> ExitCode {
    let color = if color_allowed() { ColorChoice::Auto } else { ColorChoice::Never };
    let cmd = <Cli as clap::CommandFactory>::command().color(color);
    let cli = match cmd.try_get_matches().and_then(|m| <Cli as clap::FromArgMatches>::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.quiet { "error" } else { "warn" };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .with_ansi(color_allowed() && std::io::stderr().is_terminal())
        .try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::User(msg) | CliError::Internal(msg)) = &e;
            let prefix = if color_allowed() && std::io::stderr().is_terminal() {
                "\x1b[31merror:\x1b[0m"
            } else {
                "error:"
            };
            eprintln!("{prefix} {msg}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::User(format!("config file {} not found", p.display())));
            }
            Ok(Config::load(p)?)
        }
        None => Ok(Config::default()),
    }
}

fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::User(format!("input file {} not found", p.display())))
    }
}

fn open(p: &Path) -> CliResult<BufReader<std::fs::File>> {
    require_file(p)?;
    Ok(BufReader::new(std::fs::File::open(p).map_err(Error::from)?))
}

struct Session {
    engine: Engine,
    state: Option<PathBuf>,
}

impl Session {
    fn open(config: Config, state: Option<PathBuf>) -> CliResult<Self> {
        let engine = match &state {
            Some(p) if p.exists() => Engine::load_snapshot(config, p)?,
            _ => {
                let e = Engine::new(config)?;
                e.load_data_files()?;
                e
            }
        };
        Ok(Self { engine, state })
    }

    fn persist(&self) -> CliResult<()> {
        if let Some(p) = &self.state {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(Error::from)?;
            }
            self.engine.save_snapshot(p)?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let out = Output {
        json: cli.json,
        quiet: cli.quiet,
    };
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::IngestDocs { path } => {
            let docs = parse_documents_jsonl(open(&path)?)?;
            let s = Session::open(config, cli.state)?;
            let n = s.engine.ingest_documents(docs)?;
            s.persist()?;
            out.emit(json!({ "ingested": n, "documents": s.engine.index().len() }), || {
                format!("ingested {n} documents")
            })
        }
        Command::IngestTriples { path } => {
            let reader = open(&path)?;
            let s = Session::open(config, cli.state)?;
            let r = s.engine.ingest_triples_tsv(reader)?;
            s.persist()?;
            out.emit(json!({ "records": r.records, "new": r.new, "triples": s.engine.kg().graph.len() }), || {
                format!("ingested {} triples ({} new)", r.records, r.new)
            })
        }
        Command::IngestGazetteer { path } => {
            let g = Gazetteer::from_json_reader(open(&path)?)?;
            let s = Session::open(config, cli.state)?;
            let n = s.engine.extend_gazetteer(g.entries().to_vec())?;
            s.persist()?;
            out.emit(json!({ "entries": n }), || format!("added {n} gazetteer entries"))
        }
        Command::TrainKg { epochs, dim, seed } => {
            let t = &mut config.kg.transe;
            t.epochs = epochs.map_or(t.epochs, |e| e as usize);
            t.dim = dim.unwrap_or(t.dim);
            t.seed = seed.unwrap_or(t.seed);
            t.validate()?;
            let transe = t.clone();
            let s = Session::open(config, cli.state)?;
            let report = s.engine.train_kg(Some(&transe))?;
            let kg = s.engine.kg();
            let hits = hits_at_k(&kg.graph, kg.embeddings.as_ref().expect("just trained"), 10)?;
            s.persist()?;
            let final_loss = report.epoch_losses.last().copied();
            out.emit(
                json!({ "triples": kg.graph.len(), "epochs": report.epoch_losses.len(), "final_loss": final_loss, "hits_at_10": hits }),
                || {
                    format!(
                        "trained {} epochs on {} triples: final loss {:.4}, hits@10 {:.3}",
                        report.epoch_losses.len(),
                        kg.graph.len(),
                        final_loss.unwrap_or(f64::NAN),
                        hits
                    )
                },
            )
        }
        Command::TrainGate {
            path,
            rounds,
            batch,
            lr,
            seed,
        } => {
            let examples = read_routes(&path)?;
            if let Some(lr) = lr {
                config.ppo.learning_rate = lr;
            }
            config.ppo.validate()?;
            if !config.ppo.allow_any_batch && !(100..=200).contains(&batch) {
                return Err(CliError::User(format!(
                    "batch {batch} outside 100..=200; set ppo.allow_any_batch to use it"
                )));
            }
            let s = Session::open(config, cli.state)?;
            let log = s.engine.train_gate(&examples, rounds, batch, seed)?;
            let policy = s.engine.policy();
            let mut correct = 0;
            for (text, id) in &examples {
                let v = lexmoe_core::embedding::embed(text, s.engine.embedder().as_ref())?;
                if policy.gate.gate(&v)?.argmax() == *id {
                    correct += 1;
                }
            }
            s.persist()?;
            let accuracy = correct as f64 / examples.len() as f64;
            out.emit(
                json!({ "updates": log.len(), "policy_version": policy.gate.version, "train_accuracy": accuracy,
                        "mean_reward": log.last().map(|u| u.mean_reward) }),
                || {
                    format!(
                        "{} updates, policy version {}, routing accuracy on the training set {:.3}",
                        log.len(),
                        policy.gate.version,
                        accuracy
                    )
                },
            )
        }
        Command::Query { text, theta, k } => {
            if let Some(t) = theta {
                config.retrieval.theta = t;
            }
            if let Some(k) = k {
                config.moe.k = k;
            }
            config.validate()?;
            let s = Session::open(config, cli.state)?;
            let outcome = s.engine.query(&text, &Actor::new(Role::Consultant, "cli"))?;
            s.persist()?;
            let value = serde_json::to_value(&outcome).map_err(|e| CliError::Internal(e.to_string()))?;
            out.emit(value, || render_outcome(&outcome, &s.engine))
        }
        Command::Eval { task, data, metric, out: report_path } => {
            let (task, data, first_sentence) = resolve_task(&task, data, cli.config.as_deref())?;
            let eval_task = EvalTask::new(task, metric.map(Into::into), &data)?;
            let records = parse_eval_jsonl(open(&data)?)?;
            let s = Session::open(config, None)?;
            if s.engine.index().is_empty() && records.iter().any(|r| r.docs.is_none()) {
                return Err(CliError::User("the document index is empty and some records carry no documents".into()));
            }
            let pipeline = EnginePipeline {
                engine: &s.engine,
                first_sentence: first_sentence || eval_task.metric == MetricKind::Accuracy,
            };
            let report = run_eval(&eval_task, &records, &pipeline)?;
            write_report(&report_path, &report)?;
            out.emit(
                json!({ "task": report.task, "metric": report.metric, "score": report.score,
                        "abstention_rate": report.abstention_rate, "n": report.n, "report": report_path }),
                || {
                    format!(
                        "{} {:?}: {} over {} pairs (abstention {:.2}); report written to {}",
                        report.task,
                        report.metric,
                        report.score.map_or("undefined".to_string(), |s| format!("{s:.4}")),
                        report.n,
                        report.abstention_rate,
                        report_path.display()
                    )
                },
            )
        }
        Command::Serve { bind } => {
            if let Some(b) = bind {
                config.service.bind = b;
            }
            if let Some(state) = cli.state {
                config.service.snapshot = Some(state);
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
            rt.block_on(lexmoe_service::serve(config)).map_err(|e| match e {
                lexmoe_service::ServeError::Engine(e) => e.into(),
                lexmoe_service::ServeError::Bind { .. } => CliError::User(e.to_string()),
                other => CliError::Internal(other.to_string()),
            })?;
            out.emit(json!({ "stopped": true }), || "server stopped".into())
        }
        Command::Snapshot { action } => match action {
            SnapshotAction::Save { path } => {
                let s = Session::open(config, cli.state)?;
                s.engine.save_snapshot(&path)?;
                let m = s.engine.metrics();
                out.emit(json!({ "path": path, "metrics": m }), || {
                    format!("saved {} documents, {} triples, {} cases to {}", m.documents, m.triples, m.cases, path.display())
                })
            }
            SnapshotAction::Load { path } => {
                require_file(&path)?;
                let engine = Engine::load_snapshot(config, &path)?;
                if let Some(state) = &cli.state {
                    engine.save_snapshot(state)?;
                }
                let m = engine.metrics();
                out.emit(json!({ "path": path, "metrics": m, "adopted": cli.state.is_some() }), || {
                    format!(
                        "snapshot ok: {} documents, {} triples, {} cases, policy version {}",
                        m.documents, m.triples, m.cases, m.policy_version
                    )
                })
            }
        },
    }
}

#[derive(Deserialize, Serialize)]
struct RouteExample {
    text: String,
    expert: usize,
}

fn read_routes(path: &Path) -> CliResult<Vec<(String, ExpertId)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(Error::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RouteExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((r.text, ExpertId(r.expert)));
    }
    if out.is_empty() {
        return Err(CliError::User(format!("{} holds no routing examples", path.display())));
    }
    Ok(out)
}

/// Maps a task argument to (task, dataset, score first sentence only).
fn resolve_task(name: &str, data: Option<PathBuf>, config: Option<&Path>) -> CliResult<(Task, PathBuf, bool)> {
    let fixture = |file: &str| -> PathBuf {
        let base = config
            .and_then(Path::parent)
            .map(|d| d.join("eval"))
            .filter(|d| d.is_dir())
            .unwrap_or_else(|| PathBuf::from("fixtures/eval"));
        base.join(file)
    };
    let (task, default, first) = match name {
        "rouge-fixture" => (Task::CasesIdentification, Some(fixture("rouge.jsonl")), false),
        "qa-fixture" => (Task::QuestionAnswering, Some(fixture("qa.jsonl")), true),
        other => (other.parse::<Task>()?, None, false),
    };
    let data = data
        .or(default)
        .ok_or_else(|| CliError::User(format!("--data is required for task {name}")))?;
    Ok((task, data, first))
}

fn write_report(path: &Path, report: &MetricReport) -> CliResult<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn render_outcome(o: &QueryOutcome, engine: &Engine) -> String {
    let mut s = format!("case {} ({})\n", o.case_id, o.state);
    match &o.answer {
        Some(a) => {
            s.push_str("\nanswer:\n");
            for line in a.lines() {
                s.push_str(&format!("  {line}\n"));
            }
        }
        None if o.abstained => s.push_str("\nno document cleared the similarity threshold; abstaining\n"),
        None => s.push_str("\nno answer\n"),
    }
    if !o.citations.is_empty() {
        s.push_str("\ncitations:\n");
        let index = engine.index();
        for c in &o.citations {
            let title = index.get(c).map(|d| d.title.clone()).unwrap_or_default();
            s.push_str(&format!("  {c}  {title}\n"));
        }
    }
    if let Some(g) = &o.gate {
        let experts = engine.experts();
        s.push_str(&format!("\ngate (policy v{}):\n", o.policy_version));
        for (i, p) in g.g.iter().enumerate() {
            let role = experts.get(i).map(|e| e.role.as_str()).unwrap_or("?");
            let mark = if g.active.iter().any(|a| a.expert.0 == i + 1) { "*" } else { " " };
            s.push_str(&format!("  {mark} expert {} ({role}) {p:.4}\n", i + 1));
        }
    }
    for d in &o.diagnostics {
        s.push_str(&format!("\nnote: {d}\n"));
    }
    s.trim_end().to_string()
}
