//! Thread-safe engine over the document index, knowledge graph, routing
//! policy, cases and feedback buffer.
//!
//! Each store sits behind its own lock holding an `Arc`; readers clone the
//! `Arc` and work on that version while writers build a new value and swap it
//! in, so a query never observes a half-applied update.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, EmbedderConfig};
use crate::embedding::{Embedder, Vector};
use crate::error::{Error, Result};
use crate::eval::{EvalRecord, Pipeline, Prediction};
use crate::generation::split_sentences;
use crate::kg::{
    train_transe, Gazetteer, GazetteerEntry, IngestReport, KgEmbeddings, KnowledgeGraph,
    TrainingReport, TransEConfig, Triple,
};
use crate::moe::{ExpertId, ExpertRegistry, GatingDistribution, GatingNetwork};
use crate::retriever::{DocumentIndex, KgView, NewDocument};
use crate::rlhf::{
    compute_reward, ppo_update, sample_action, should_update, FeedbackRecord, PolicyState,
    Trajectory,
};
use crate::snapshot;
use crate::taxonomy::{Role, Task};
use crate::workflow::{
    Actor, Case, CaseState, FinalDocument, QuestionAnswer, ResearchContext, RoutingContext,
    TemplateStore, Verdict,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KgStore {
    pub graph: KnowledgeGraph,
    pub gazetteer: Gazetteer,
    pub embeddings: Option<KgEmbeddings<f64>>,
}

impl KgStore {
    /// Trained embeddings are used only when they cover every linkable entity.
    pub fn view(&self) -> KgView<'_, f64> {
        match &self.embeddings {
            Some(e)
                if self
                    .gazetteer
                    .entity_ids()
                    .iter()
                    .all(|id| e.entity_vectors.contains_key(id)) =>
            {
                KgView::Embedded(e)
            }
            _ => KgView::Exact,
        }
    }
}

/// Routing decision kept until feedback turns it into a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingRoute {
    pub question: usize,
    pub query: Vector<f64>,
    pub old_probs: GatingDistribution<f64>,
    pub action: ExpertId,
    pub policy_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: Case<f64>,
    pub created: DateTime<Utc>,
    pub routes: Vec<PendingRoute>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub record: FeedbackRecord,
    pub reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBuffer {
    pub pending: Vec<Trajectory<f64>>,
    pub log: Vec<FeedbackEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub version: u64,
    pub batch_size: usize,
    pub mean_reward: f64,
    pub baseline: f64,
    pub objectives: Vec<f64>,
    pub clip_fraction: f64,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Counters {
    next_case: u64,
    recent_abstentions: VecDeque<bool>,
    updates: Vec<UpdateSummary>,
}

/// Everything needed to rebuild an engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub format_version: u32,
    pub embedder: EmbedderConfig,
    pub index: DocumentIndex<f64>,
    pub kg: KgStore,
    pub policy: PolicyState<f64>,
    pub feedback: FeedbackBuffer,
    pub cases: Vec<CaseRecord>,
    pub next_case: u64,
    pub recent_abstentions: Vec<bool>,
    pub updates: Vec<UpdateSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScoreView {
    pub id: String,
    pub title: String,
    pub score: f64,
    pub text_score: f64,
    pub kg_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScores {
    pub question: String,
    pub abstained: bool,
    pub best_score: f64,
    pub documents: Vec<DocScoreView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveExpert {
    pub expert: ExpertId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub question: usize,
    pub g: Vec<f64>,
    pub active: Vec<ActiveExpert>,
}

impl GateReport {
    fn from_answer(a: &QuestionAnswer<f64>) -> Self {
        Self {
            question: a.question,
            g: a.gate.probs.clone(),
            active: a
                .decision
                .active
                .iter()
                .zip(&a.decision.gates_used)
                .map(|(&expert, &weight)| ActiveExpert { expert, weight })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub case_id: String,
    pub state: CaseState,
    pub answer: Option<String>,
    pub citations: Vec<String>,
    pub abstained: bool,
    pub scores: Vec<QuestionScores>,
    /// Gate report of the first answered question.
    pub gate: Option<GateReport>,
    pub gates: Vec<GateReport>,
    pub policy_version: u64,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReceipt {
    pub case_id: String,
    pub reward: f64,
    pub trajectories: usize,
    pub buffered: usize,
    pub update: Option<UpdateSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineMetrics {
    pub n_feedback: usize,
    pub mean_reward: Option<f64>,
    pub policy_version: u64,
    pub baseline: f64,
    pub abstention_rate_window: Option<f64>,
    pub buffered: usize,
    pub cases: usize,
    pub documents: usize,
    pub triples: usize,
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocPreview {
    pub id: String,
    pub title: String,
    pub snippet: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueueItem {
    pub case_id: String,
    pub state: CaseState,
    pub questions: Vec<String>,
    pub answer: Option<String>,
    pub citations: Vec<String>,
    pub documents: Vec<DocPreview>,
    pub gate: Vec<GateReport>,
    pub age_seconds: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertInfo {
    pub id: ExpertId,
    pub role: Role,
    pub tasks: BTreeSet<Task>,
    pub handler: String,
}

pub struct Engine {
    config: Config,
    embedder: Arc<dyn Embedder<f64>>,
    registry: ExpertRegistry<f64>,
    templates: TemplateStore,
    index: RwLock<Arc<DocumentIndex<f64>>>,
    kg: RwLock<Arc<KgStore>>,
    policy: RwLock<Arc<PolicyState<f64>>>,
    cases: RwLock<BTreeMap<String, Arc<Mutex<CaseRecord>>>>,
    feedback: Mutex<FeedbackBuffer>,
    counters: Mutex<Counters>,
    update_guard: Mutex<()>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn read<T: Clone>(l: &RwLock<Arc<T>>) -> Arc<T> {
    l.read().unwrap_or_else(|p| p.into_inner()).clone()
}

fn swap<T>(l: &RwLock<Arc<T>>, v: T) {
    *l.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(v);
}

const ROUTER: &str = "router";

impl Engine {
    /// A fresh engine with empty stores and a newly initialized gate.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let embedder = config.embedder.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.moe.seed);
        let gate = GatingNetwork::random(
            config.moe.experts,
            embedder.dim(),
            config.moe.init_scale,
            &mut rng,
        )?;
        let index = DocumentIndex::new(embedder.dim())?;
        let kg = KgStore {
            gazetteer: Gazetteer::new(Vec::new(), config.kg.case_fold)?,
            ..Default::default()
        };
        Self::assemble(
            config,
            embedder,
            index,
            kg,
            PolicyState::new(gate),
            FeedbackBuffer::default(),
            Vec::new(),
            Counters::default(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: Config,
        embedder: Arc<dyn Embedder<f64>>,
        index: DocumentIndex<f64>,
        kg: KgStore,
        policy: PolicyState<f64>,
        feedback: FeedbackBuffer,
        cases: Vec<CaseRecord>,
        counters: Counters,
    ) -> Result<Self> {
        let registry = ExpertRegistry::from_specs(&config.experts, &embedder)?;
        if policy.gate.experts() != registry.len() || policy.gate.dim() != embedder.dim() {
            return Err(Error::Configuration(format!(
                "gate is {}x{} but the configuration needs {}x{}",
                policy.gate.experts(),
                policy.gate.dim(),
                registry.len(),
                embedder.dim()
            )));
        }
        if index.dim() != embedder.dim() {
            return Err(Error::Dimension {
                expected: embedder.dim(),
                found: index.dim(),
            });
        }
        let mut templates = TemplateStore::default();
        if let Some(dir) = &config.workflow.templates_dir {
            templates.load_dir(dir)?;
        }
        if !templates.contains(&config.workflow.default_template) {
            return Err(Error::Template(format!(
                "default template {:?} not found",
                config.workflow.default_template
            )));
        }
        let cases = cases
            .into_iter()
            .map(|c| (c.case.id.clone(), Arc::new(Mutex::new(c))))
            .collect();
        Ok(Self {
            config,
            embedder,
            registry,
            templates,
            index: RwLock::new(Arc::new(index)),
            kg: RwLock::new(Arc::new(kg)),
            policy: RwLock::new(Arc::new(policy)),
            cases: RwLock::new(cases),
            feedback: Mutex::new(feedback),
            counters: Mutex::new(counters),
            update_guard: Mutex::new(()),
        })
    }

    /// Loads the configured snapshot when it exists, otherwise starts fresh
    /// and ingests the configured data files.
    pub fn bootstrap(config: Config) -> Result<Self> {
        if let Some(p) = config.service.snapshot.clone() {
            if p.exists() {
                return Self::load_snapshot(config, &p);
            }
        }
        let engine = Self::new(config)?;
        engine.load_data_files()?;
        Ok(engine)
    }

    pub fn load_data_files(&self) -> Result<()> {
        let data = self.config.data.clone();
        if let Some(p) = &data.gazetteer {
            let g = Gazetteer::from_json_reader(std::fs::File::open(p)?)?;
            self.extend_gazetteer(g.entries().to_vec())?;
        }
        if let Some(p) = &data.triples {
            self.ingest_triples_tsv(std::io::BufReader::new(std::fs::File::open(p)?))?;
        }
        if let Some(p) = &data.docs {
            let docs = crate::retriever::parse_documents_jsonl(std::io::BufReader::new(
                std::fs::File::open(p)?,
            ))?;
            self.ingest_documents(docs)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder<f64>> {
        &self.embedder
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    pub fn index(&self) -> Arc<DocumentIndex<f64>> {
        read(&self.index)
    }

    pub fn kg(&self) -> Arc<KgStore> {
        read(&self.kg)
    }

    pub fn policy(&self) -> Arc<PolicyState<f64>> {
        read(&self.policy)
    }

    /// Replaces the routing policy, e.g. with one trained offline.
    pub fn set_policy(&self, policy: PolicyState<f64>) -> Result<()> {
        let cur = self.policy();
        if policy.gate.experts() != cur.gate.experts() || policy.gate.dim() != cur.gate.dim() {
            return Err(Error::Dimension {
                expected: cur.gate.experts() * cur.gate.dim(),
                found: policy.gate.experts() * policy.gate.dim(),
            });
        }
        swap(&self.policy, policy);
        Ok(())
    }

    /// All-or-nothing: a bad document leaves the index unchanged.
    pub fn ingest_documents(&self, docs: Vec<NewDocument>) -> Result<usize> {
        let mut guard = self.index.write().unwrap_or_else(|p| p.into_inner());
        let kg = self.kg();
        let mut next = (**guard).clone();
        let n = docs.len();
        for d in docs {
            next.add(d, self.embedder.as_ref(), &kg.gazetteer)?;
        }
        *guard = Arc::new(next);
        Ok(n)
    }

    /// New entities invalidate trained embeddings.
    pub fn ingest_triples(&self, triples: Vec<Triple>) -> Result<IngestReport> {
        let mut guard = self.kg.write().unwrap_or_else(|p| p.into_inner());
        let mut next = (**guard).clone();
        let before = next.graph.entities().len() + next.graph.relations().len();
        let report = next.graph.ingest(triples)?;
        if next.graph.entities().len() + next.graph.relations().len() != before {
            next.embeddings = None;
        }
        *guard = Arc::new(next);
        Ok(report)
    }

    pub fn ingest_triples_tsv<R: std::io::BufRead>(&self, reader: R) -> Result<IngestReport> {
        self.ingest_triples(crate::kg::parse_tsv(reader)?)
    }

    /// Adds aliases, registers their entities in the graph vocabulary and
    /// relinks every indexed document.
    pub fn extend_gazetteer(&self, entries: Vec<GazetteerEntry>) -> Result<usize> {
        let n = entries.len();
        {
            let mut guard = self.kg.write().unwrap_or_else(|p| p.into_inner());
            let mut next = (**guard).clone();
            next.gazetteer.extend(entries)?;
            let before = next.graph.entities().len();
            for id in next.gazetteer.entity_ids() {
                next.graph.register_entity(&id)?;
            }
            if next.graph.entities().len() != before {
                next.embeddings = None;
            }
            *guard = Arc::new(next);
        }
        let kg = self.kg();
        let mut guard = self.index.write().unwrap_or_else(|p| p.into_inner());
        let mut next = (**guard).clone();
        next.relink(&kg.gazetteer);
        *guard = Arc::new(next);
        Ok(n)
    }

    pub fn train_kg(&self, cfg: Option<&TransEConfig>) -> Result<TrainingReport> {
        let cfg = cfg.unwrap_or(&self.config.kg.transe);
        let mut guard = self.kg.write().unwrap_or_else(|p| p.into_inner());
        let (emb, report) = train_transe(&guard.graph, cfg)?;
        let mut next = (**guard).clone();
        next.embeddings = Some(emb);
        *guard = Arc::new(next);
        Ok(report)
    }

    fn next_case_id(&self) -> String {
        let mut c = lock(&self.counters);
        c.next_case += 1;
        format!("case-{:06}", c.next_case)
    }

    /// Runs intake, research and routing for `text` (one question per line)
    /// without storing anything.
    fn run_case(
        &self,
        id: String,
        text: &str,
        actor: &Actor,
        index: &DocumentIndex<f64>,
    ) -> Result<(Case<f64>, Vec<PendingRoute>)> {
        if index.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let kg = self.kg();
        let policy = self.policy();
        let mut case = Case::new(id);
        case.formulate(actor, text)?;
        let researcher = Actor::system(Role::Researcher);
        case.research(
            &researcher,
            &ResearchContext {
                index,
                embedder: self.embedder.as_ref(),
                gazetteer: &kg.gazetteer,
                kg: kg.view(),
                config: &self.config.retrieval,
            },
        )?;
        if case.state() == CaseState::Abstained {
            return Ok((case, Vec::new()));
        }
        let router = Actor::new(Role::Researcher, ROUTER);
        let ctx = RoutingContext {
            gate: &policy.gate,
            registry: &self.registry,
            moe: self.config.moe,
            graph: Some(&kg.graph),
            max_kg_facts: self.config.kg.max_facts,
        };
        let routed = case.route_and_answer(&router, &ctx).map(|_| ());
        match routed {
            Ok(()) => {}
            Err(Error::Routing(msg)) if case.state() == CaseState::Revise => {
                tracing::warn!(case = %case.id, %msg, "routing failed, case sent to revise");
            }
            Err(e) => return Err(e),
        }
        let routes = case
            .answers
            .iter()
            .map(|a| PendingRoute {
                question: a.question,
                query: case.research[a.question].vector.clone(),
                old_probs: a.gate.clone(),
                action: a.decision.active[0],
                policy_version: policy.gate.version,
            })
            .collect();
        if case.state() == CaseState::Aggregated {
            case.open_review(&router)?;
        }
        Ok((case, routes))
    }

    fn outcome(&self, case: &Case<f64>) -> QueryOutcome {
        let gates: Vec<GateReport> = case.answers.iter().map(GateReport::from_answer).collect();
        QueryOutcome {
            case_id: case.id.clone(),
            state: case.state(),
            answer: case.aggregated.clone(),
            citations: case.citations(),
            abstained: case.state() == CaseState::Abstained,
            scores: case
                .research
                .iter()
                .map(|r| QuestionScores {
                    question: r.question.clone(),
                    abstained: r.result.abstained,
                    best_score: r.result.best_score,
                    documents: r
                        .result
                        .documents
                        .iter()
                        .map(|d| DocScoreView {
                            id: d.id.clone(),
                            title: d.title.clone(),
                            score: d.score,
                            text_score: d.text_score,
                            kg_score: d.kg_score,
                        })
                        .collect(),
                })
                .collect(),
            gate: gates.first().cloned(),
            gates,
            policy_version: self.policy().gate.version,
            diagnostics: case.diagnostics.clone(),
        }
    }

    /// Opens a case for `text` and runs it up to advisor review (or
    /// abstention). One question per nonblank line.
    pub fn query(&self, text: &str, actor: &Actor) -> Result<QueryOutcome> {
        let index = self.index();
        if index.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let (case, routes) = self.run_case(self.next_case_id(), text, actor, &index)?;
        let out = self.outcome(&case);
        {
            let mut c = lock(&self.counters);
            c.recent_abstentions.push_back(out.abstained);
            while c.recent_abstentions.len() > self.config.rlhf.abstention_window {
                c.recent_abstentions.pop_front();
            }
        }
        let record = CaseRecord {
            case,
            created: Utc::now(),
            routes,
        };
        self.cases
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(out.case_id.clone(), Arc::new(Mutex::new(record)));
        Ok(out)
    }

    /// Answer text for an evaluation record, using the record's own documents
    /// when it carries any.
    pub fn answer(&self, text: &str, docs: Option<&[String]>) -> Result<QueryOutcome> {
        let actor = Actor::system(Role::Consultant);
        let index = match docs {
            Some(docs) => {
                let kg = self.kg();
                let mut idx = DocumentIndex::new(self.embedder.dim())?;
                for (i, d) in docs.iter().enumerate() {
                    idx.add(
                        NewDocument {
                            id: format!("doc-{}", i + 1),
                            title: String::new(),
                            text: d.clone(),
                            tags: BTreeSet::new(),
                        },
                        self.embedder.as_ref(),
                        &kg.gazetteer,
                    )?;
                }
                Arc::new(idx)
            }
            None => self.index(),
        };
        let (case, _) = self.run_case("eval".into(), text, &actor, &index)?;
        Ok(self.outcome(&case))
    }

    fn case_handle(&self, id: &str) -> Result<Arc<Mutex<CaseRecord>>> {
        self.cases
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("case {id}")))
    }

    pub fn case(&self, id: &str) -> Result<Case<f64>> {
        let h = self.case_handle(id)?;
        let case = lock(&h).case.clone();
        Ok(case)
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.cases
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    pub fn review(
        &self,
        id: &str,
        actor: &Actor,
        verdict: Verdict,
        notes: Option<String>,
        edited: Option<String>,
    ) -> Result<Case<f64>> {
        let h = self.case_handle(id)?;
        let mut rec = lock(&h);
        rec.case.advisor_review(actor, verdict, notes, edited)?;
        Ok(rec.case.clone())
    }

    pub fn finalize(
        &self,
        id: &str,
        actor: &Actor,
        template: Option<&str>,
    ) -> Result<FinalDocument> {
        let h = self.case_handle(id)?;
        let mut rec = lock(&h);
        let template = template.unwrap_or(&self.config.workflow.default_template);
        Ok(rec
            .case
            .paralegal_finalize(actor, template, &self.templates)?
            .clone())
    }

    /// Turns a reviewer rating into one trajectory per routed question of the
    /// case and may trigger a policy update.
    pub fn submit_feedback(&self, record: FeedbackRecord) -> Result<FeedbackReceipt> {
        if !record.affects_policy() {
            return Err(Error::Authorization {
                required: "advisor or paralegal".into(),
                actual: record.role.to_string(),
            });
        }
        let h = self.case_handle(&record.case_id)?;
        let record = record.complete(&self.config.qualitative)?;
        let signal = compute_reward(&record, &self.config.reward, &self.config.qualitative)?;
        let routes = lock(&h).routes.clone();
        let buffered = {
            let mut buf = lock(&self.feedback);
            for r in &routes {
                buf.pending.push(Trajectory {
                    query: r.query.clone(),
                    old_probs: r.old_probs.clone(),
                    action: r.action,
                    reward: signal.reward,
                });
            }
            buf.log.push(FeedbackEntry {
                record: record.clone(),
                reward: signal.reward,
            });
            buf.pending.len()
        };
        let mut update = None;
        if self.config.rlhf.auto_update {
            match self.update_policy(false) {
                Ok(u) => update = u,
                Err(e) => tracing::error!(error = %e, "automatic policy update failed"),
            }
        }
        Ok(FeedbackReceipt {
            case_id: record.case_id,
            reward: signal.reward,
            trajectories: routes.len(),
            buffered: if update.is_some() { 0 } else { buffered },
            update,
        })
    }

    /// Drains the buffer into one PPO update. Without `force` the buffer must
    /// qualify first. A failed update puts the batch back and keeps the policy.
    pub fn update_policy(&self, force: bool) -> Result<Option<UpdateSummary>> {
        let _exclusive = lock(&self.update_guard);
        let batch = {
            let mut buf = lock(&self.feedback);
            let rewards: Vec<f64> = buf.pending.iter().map(|t| t.reward).collect();
            if buf.pending.is_empty() || (!force && !should_update(&rewards, &self.config.ppo)) {
                return Ok(None);
            }
            std::mem::take(&mut buf.pending)
        };
        let current = self.policy();
        match ppo_update(&current, &batch, &self.config.ppo) {
            Ok(report) => {
                let summary = UpdateSummary {
                    version: report.state.gate.version,
                    batch_size: report.batch_size,
                    mean_reward: report.mean_reward,
                    baseline: report.state.baseline,
                    objectives: report.objectives,
                    clip_fraction: report.clip_fraction,
                    at: Utc::now(),
                };
                swap(&self.policy, report.state);
                lock(&self.counters).updates.push(summary.clone());
                tracing::info!(
                    version = summary.version,
                    batch = summary.batch_size,
                    "policy updated"
                );
                Ok(Some(summary))
            }
            Err(e) => {
                let mut buf = lock(&self.feedback);
                let newer = std::mem::take(&mut buf.pending);
                buf.pending = batch;
                buf.pending.extend(newer);
                Err(e)
            }
        }
    }

    /// Bandit training against labelled routing examples: each round samples
    /// `batch` examples, draws an expert from the current gate and rewards 1
    /// when it matches the label.
    pub fn train_gate(
        &self,
        examples: &[(String, ExpertId)],
        rounds: usize,
        batch: usize,
        seed: u64,
    ) -> Result<Vec<UpdateSummary>> {
        if examples.is_empty() || batch == 0 {
            return Err(Error::Validation(
                "gate training needs examples and a positive batch".into(),
            ));
        }
        let n = self.registry.len();
        let vectors = examples
            .iter()
            .map(|(text, id)| {
                if id.0 == 0 || id.0 > n {
                    return Err(Error::Validation(format!("expert {id} outside 1..={n}")));
                }
                crate::embedding::embed(text, self.embedder.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order: Vec<usize> = (0..examples.len()).collect();
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let state = self.policy();
            let mut trajectories = Vec::with_capacity(batch);
            for _ in 0..batch {
                let &i = order.choose(&mut rng).expect("nonempty");
                let g = state.gate.gate(&vectors[i])?;
                let action = sample_action(&g, &mut rng);
                trajectories.push(Trajectory {
                    query: vectors[i].clone(),
                    old_probs: g,
                    action,
                    reward: if action == examples[i].1 { 1.0 } else { 0.0 },
                });
            }
            let report = ppo_update(&state, &trajectories, &self.config.ppo)?;
            let summary = UpdateSummary {
                version: report.state.gate.version,
                batch_size: report.batch_size,
                mean_reward: report.mean_reward,
                baseline: report.state.baseline,
                objectives: report.objectives,
                clip_fraction: report.clip_fraction,
                at: Utc::now(),
            };
            swap(&self.policy, report.state);
            lock(&self.counters).updates.push(summary.clone());
            out.push(summary);
        }
        Ok(out)
    }

    pub fn metrics(&self) -> EngineMetrics {
        let buf = lock(&self.feedback);
        let counters = lock(&self.counters);
        let policy = self.policy();
        let n = buf.log.len();
        let recent = &counters.recent_abstentions;
        EngineMetrics {
            n_feedback: n,
            mean_reward: (n > 0).then(|| buf.log.iter().map(|f| f.reward).sum::<f64>() / n as f64),
            policy_version: policy.gate.version,
            baseline: policy.baseline,
            abstention_rate_window: (!recent.is_empty())
                .then(|| recent.iter().filter(|&&a| a).count() as f64 / recent.len() as f64),
            buffered: buf.pending.len(),
            cases: self.cases.read().unwrap_or_else(|p| p.into_inner()).len(),
            documents: self.index().len(),
            triples: self.kg().graph.len(),
            updates: counters.updates.len(),
        }
    }

    /// Cases waiting on a reviewer. Advisors see cases awaiting review,
    /// paralegals those awaiting finalization; `None` lists both.
    pub fn review_queue(&self, role: Option<Role>) -> Vec<ReviewQueueItem> {
        let wanted: &[CaseState] = match role {
            Some(Role::Advisor) => &[CaseState::Aggregated, CaseState::AdvisorReview],
            Some(Role::Paralegal) => &[CaseState::ParalegalFinalize],
            Some(_) => &[],
            None => &[
                CaseState::Aggregated,
                CaseState::AdvisorReview,
                CaseState::ParalegalFinalize,
            ],
        };
        let handles: Vec<_> = self
            .cases
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .values()
            .cloned()
            .collect();
        let now = Utc::now();
        let mut items: Vec<ReviewQueueItem> = handles
            .iter()
            .filter_map(|h| {
                let rec = lock(h);
                let c = &rec.case;
                wanted.contains(&c.state()).then(|| ReviewQueueItem {
                    case_id: c.id.clone(),
                    state: c.state(),
                    questions: c.questions.clone(),
                    answer: c.reviewed.clone(),
                    citations: c.citations(),
                    documents: c
                        .research
                        .iter()
                        .flat_map(|r| &r.result.documents)
                        .map(|d| DocPreview {
                            id: d.id.clone(),
                            title: d.title.clone(),
                            snippet: split_sentences(&d.text)
                                .first()
                                .map(|s| s.to_string())
                                .unwrap_or_default(),
                            score: d.score,
                        })
                        .collect(),
                    gate: c.answers.iter().map(GateReport::from_answer).collect(),
                    age_seconds: (now - rec.created).num_seconds(),
                })
            })
            .collect();
        items.sort_by(|a, b| {
            b.age_seconds
                .cmp(&a.age_seconds)
                .then(a.case_id.cmp(&b.case_id))
        });
        items
    }

    pub fn experts(&self) -> Vec<ExpertInfo> {
        self.registry
            .profiles()
            .map(|p| ExpertInfo {
                id: p.id,
                role: p.role,
                tasks: p.tasks.clone(),
                handler: self
                    .registry
                    .handler_kind(p.id)
                    .unwrap_or_default()
                    .to_owned(),
            })
            .collect()
    }

    /// A consistent copy of every store.
    pub fn snapshot(&self) -> EngineSnapshot {
        let _exclusive = lock(&self.update_guard);
        let handles: Vec<_> = self
            .cases
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .values()
            .cloned()
            .collect();
        let cases = handles.iter().map(|h| lock(h).clone()).collect();
        let counters = lock(&self.counters).clone();
        EngineSnapshot {
            format_version: snapshot::FORMAT_VERSION,
            embedder: self.config.embedder.clone(),
            index: (*self.index()).clone(),
            kg: (*self.kg()).clone(),
            policy: (*self.policy()).clone(),
            feedback: lock(&self.feedback).clone(),
            cases,
            next_case: counters.next_case,
            recent_abstentions: counters.recent_abstentions.into_iter().collect(),
            updates: counters.updates,
        }
    }

    pub fn from_snapshot(mut config: Config, snap: EngineSnapshot) -> Result<Self> {
        if snap.format_version != snapshot::FORMAT_VERSION {
            return Err(Error::Version {
                found: snap.format_version,
                expected: snapshot::FORMAT_VERSION,
            });
        }
        if snap.embedder != config.embedder {
            tracing::warn!(
                "snapshot embedder differs from the configuration; using the snapshot's"
            );
            config.embedder = snap.embedder.clone();
        }
        let embedder = config.embedder.build()?;
        let counters = Counters {
            next_case: snap.next_case,
            recent_abstentions: snap.recent_abstentions.into_iter().collect(),
            updates: snap.updates,
        };
        Self::assemble(
            config,
            embedder,
            snap.index,
            snap.kg,
            snap.policy,
            snap.feedback,
            snap.cases,
            counters,
        )
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        snapshot::save(&self.snapshot(), path)
    }

    pub fn load_snapshot(config: Config, path: &Path) -> Result<Self> {
        Self::from_snapshot(config, snapshot::load(path)?)
    }
}

/// Evaluation pipeline backed by an engine. With `first_sentence` only the
/// leading answer sentence is scored, which suits exact-match accuracy.
pub struct EnginePipeline<'a> {
    pub engine: &'a Engine,
    pub first_sentence: bool,
}

impl Pipeline for EnginePipeline<'_> {
    fn predict(&self, record: &EvalRecord) -> Result<Prediction> {
        let out = self.engine.answer(&record.input, record.docs.as_deref())?;
        if out.abstained {
            return Ok(Prediction {
                text: String::new(),
                abstained: true,
            });
        }
        let body: String = out
            .answer
            .unwrap_or_default()
            .lines()
            .filter(|l| !l.starts_with("per KG:"))
            .collect::<Vec<_>>()
            .join(" ");
        let text = if self.first_sentence {
            split_sentences(&body)
                .first()
                .map(|s| s.to_string())
                .unwrap_or_default()
        } else {
            body
        };
        Ok(Prediction {
            text,
            abstained: false,
        })
    }
}

#[cfg(test)]
mod tests;
