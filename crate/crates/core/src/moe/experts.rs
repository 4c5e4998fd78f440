use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::gating::{renormalized, ExpertId, GatingDistribution, RoutingDecision};
use crate::embedding::{check_dim, Embedder, Vector};
use crate::error::{Error, Result};
use crate::generation::{
    generate, ExtractiveMock, GenerationBackend, GenerationRequest, HttpBackend, ResponseDraft,
};
use crate::kg::Triple;
use crate::retriever::RetrievedDocument;
use crate::scalar::Scalar;
use crate::taxonomy::{Role, Task};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertProfile {
    pub id: ExpertId,
    pub role: Role,
    pub tasks: BTreeSet<Task>,
}

impl ExpertProfile {
    pub fn new(id: usize, role: Role, tasks: impl IntoIterator<Item = Task>) -> Result<Self> {
        let p = Self {
            id: ExpertId(id),
            role,
            tasks: tasks.into_iter().collect(),
        };
        p.validate()?;
        Ok(p)
    }

    /// An expert covering every task of `role`.
    pub fn for_role(id: usize, role: Role) -> Self {
        Self {
            id: ExpertId(id),
            role,
            tasks: Task::tasks_for(role).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.0 == 0 {
            return Err(Error::Validation("expert ids start at 1".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Validation(format!(
                "expert {} has no tasks",
                self.id
            )));
        }
        if let Some(t) = self.tasks.iter().find(|t| t.role() != self.role) {
            return Err(Error::Validation(format!(
                "task {t} belongs to the {} role, not {}",
                t.role(),
                self.role
            )));
        }
        Ok(())
    }
}

/// What an expert sees for one question.
#[derive(Debug, Clone, Copy)]
pub struct ExpertInput<'a, T> {
    pub question: &'a str,
    pub query_vector: &'a Vector<T>,
    pub documents: &'a [RetrievedDocument<T>],
    pub kg_context: &'a [Triple],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertResponse<T> {
    pub draft: ResponseDraft,
    pub vector: Option<Vector<T>>,
}

pub trait ExpertHandler<T: Scalar>: Send + Sync {
    fn kind(&self) -> &str;
    fn handle(
        &self,
        profile: &ExpertProfile,
        input: &ExpertInput<'_, T>,
    ) -> Result<ExpertResponse<T>>;
}

/// Repeats the question, tagged with the expert id.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoHandler;

impl<T: Scalar> ExpertHandler<T> for EchoHandler {
    fn kind(&self) -> &str {
        "echo"
    }

    fn handle(
        &self,
        profile: &ExpertProfile,
        input: &ExpertInput<'_, T>,
    ) -> Result<ExpertResponse<T>> {
        Ok(ExpertResponse {
            draft: ResponseDraft::plain("echo", &format!("[{}] {}", profile.id, input.question)),
            vector: Some(input.query_vector.clone()),
        })
    }
}

/// Fills `{{question}}`, `{{expert}}`, `{{role}}` and `{{top_document}}`.
#[derive(Debug, Clone)]
pub struct TemplateHandler {
    pub template: String,
}

impl<T: Scalar> ExpertHandler<T> for TemplateHandler {
    fn kind(&self) -> &str {
        "template"
    }

    fn handle(
        &self,
        profile: &ExpertProfile,
        input: &ExpertInput<'_, T>,
    ) -> Result<ExpertResponse<T>> {
        let top = input
            .documents
            .first()
            .map(|d| d.id.as_str())
            .unwrap_or("none");
        let text = self
            .template
            .replace("{{question}}", input.question)
            .replace("{{expert}}", &profile.id.to_string())
            .replace("{{role}}", profile.role.as_str())
            .replace("{{top_document}}", top);
        Ok(ExpertResponse {
            draft: ResponseDraft::plain("template", &text),
            vector: None,
        })
    }
}

/// Runs a generation backend over the retrieved documents. If an embedder is
/// attached the draft text is embedded to give the expert an output vector.
pub struct GenerationHandler<T: Scalar> {
    backend: Box<dyn GenerationBackend<T>>,
    embedder: Option<Arc<dyn Embedder<T>>>,
    pub max_tokens: usize,
}

impl<T: Scalar> GenerationHandler<T> {
    pub fn new(
        backend: Box<dyn GenerationBackend<T>>,
        embedder: Option<Arc<dyn Embedder<T>>>,
        max_tokens: usize,
    ) -> Self {
        Self {
            backend,
            embedder,
            max_tokens,
        }
    }

    pub fn extractive(
        embedder: Arc<dyn Embedder<T>>,
        max_sentences: usize,
        max_tokens: usize,
    ) -> Self {
        let backend = ExtractiveMock::new(embedder.clone()).with_max_sentences(max_sentences);
        Self::new(Box::new(backend), Some(embedder), max_tokens)
    }
}

impl<T: Scalar> ExpertHandler<T> for GenerationHandler<T> {
    fn kind(&self) -> &str {
        self.backend.name()
    }

    fn handle(
        &self,
        _profile: &ExpertProfile,
        input: &ExpertInput<'_, T>,
    ) -> Result<ExpertResponse<T>> {
        let req = GenerationRequest {
            query: input.question,
            documents: input.documents,
            kg_context: input.kg_context,
            max_tokens: self.max_tokens,
            allow_ungrounded: false,
        };
        let draft = generate(&req, self.backend.as_ref())?;
        let vector = match &self.embedder {
            Some(e) => Some(e.embed(&draft.text())?),
            None => None,
        };
        Ok(ExpertResponse { draft, vector })
    }
}

/// One `[[experts]]` entry of the engine configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub id: usize,
    pub role: Role,
    #[serde(default)]
    pub tasks: Vec<Task>,
    pub handler_kind: HandlerKind,
    #[serde(default)]
    pub handler_params: HandlerParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandlerKind {
    Echo,
    Template,
    ExtractiveMock,
    ExternalHttp,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandlerParams {
    pub template: Option<String>,
    pub max_sentences: Option<usize>,
    pub max_tokens: Option<usize>,
    pub endpoint: Option<String>,
    pub timeout_ms: Option<u64>,
}

impl ExpertSpec {
    pub fn default_set() -> Vec<ExpertSpec> {
        [
            (Role::Consultant, 2),
            (Role::Researcher, 3),
            (Role::Paralegal, 3),
            (Role::Advisor, 2),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, (role, m))| ExpertSpec {
            id: i + 1,
            role,
            tasks: Task::tasks_for(role).collect(),
            handler_kind: HandlerKind::ExtractiveMock,
            handler_params: HandlerParams {
                max_sentences: Some(m),
                ..Default::default()
            },
        })
        .collect()
    }

    pub fn profile(&self) -> Result<ExpertProfile> {
        let tasks: Vec<Task> = if self.tasks.is_empty() {
            Task::tasks_for(self.role).collect()
        } else {
            self.tasks.clone()
        };
        ExpertProfile::new(self.id, self.role, tasks)
    }

    pub fn build_handler<T: Scalar>(
        &self,
        embedder: &Arc<dyn Embedder<T>>,
    ) -> Result<Box<dyn ExpertHandler<T>>> {
        let p = &self.handler_params;
        let max_tokens = p.max_tokens.unwrap_or(256);
        Ok(match self.handler_kind {
            HandlerKind::Echo => Box::new(EchoHandler),
            HandlerKind::Template => Box::new(TemplateHandler {
                template: p.template.clone().ok_or_else(|| {
                    Error::Configuration(format!(
                        "expert {}: template handler needs `template`",
                        self.id
                    ))
                })?,
            }),
            HandlerKind::ExtractiveMock => Box::new(GenerationHandler::extractive(
                embedder.clone(),
                p.max_sentences.unwrap_or(3),
                max_tokens,
            )),
            HandlerKind::ExternalHttp => {
                let endpoint = p.endpoint.clone().ok_or_else(|| {
                    Error::Configuration(format!(
                        "expert {}: external_http needs `endpoint`",
                        self.id
                    ))
                })?;
                let backend = HttpBackend {
                    endpoint,
                    timeout: Duration::from_millis(p.timeout_ms.unwrap_or(10_000)),
                };
                Box::new(GenerationHandler::new(
                    Box::new(backend),
                    Some(embedder.clone()),
                    max_tokens,
                ))
            }
        })
    }
}

/// Experts with contiguous ids `1..=N`, each with a handler.
#[derive(Default)]
pub struct ExpertRegistry<T: Scalar> {
    experts: Vec<(ExpertProfile, Box<dyn ExpertHandler<T>>)>,
}

impl<T: Scalar> ExpertRegistry<T> {
    pub fn new() -> Self {
        Self {
            experts: Vec::new(),
        }
    }

    pub fn from_specs(specs: &[ExpertSpec], embedder: &Arc<dyn Embedder<T>>) -> Result<Self> {
        let mut sorted: Vec<&ExpertSpec> = specs.iter().collect();
        sorted.sort_by_key(|s| s.id);
        let mut reg = Self::new();
        for s in sorted {
            reg.register(s.profile()?, s.build_handler(embedder)?)?;
        }
        Ok(reg)
    }

    pub fn register(
        &mut self,
        profile: ExpertProfile,
        handler: Box<dyn ExpertHandler<T>>,
    ) -> Result<()> {
        profile.validate()?;
        if profile.id.0 != self.experts.len() + 1 {
            return Err(Error::Validation(format!(
                "expert ids must be contiguous: expected {}, got {}",
                self.experts.len() + 1,
                profile.id.0
            )));
        }
        self.experts.push((profile, handler));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn profiles(&self) -> impl Iterator<Item = &ExpertProfile> {
        self.experts.iter().map(|(p, _)| p)
    }

    pub fn profile(&self, id: ExpertId) -> Option<&ExpertProfile> {
        self.get(id).map(|(p, _)| p)
    }

    pub fn handler_kind(&self, id: ExpertId) -> Option<&str> {
        self.get(id).map(|(_, h)| h.kind())
    }

    fn get(&self, id: ExpertId) -> Option<&(ExpertProfile, Box<dyn ExpertHandler<T>>)> {
        id.0.checked_sub(1).and_then(|i| self.experts.get(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutput<T> {
    pub expert: ExpertId,
    pub draft: ResponseDraft,
    pub vector: Option<Vector<T>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertFailure {
    pub expert: ExpertId,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionReport<T> {
    /// Successful outputs, ordered by expert id.
    pub outputs: Vec<ExpertOutput<T>>,
    pub failures: Vec<ExpertFailure>,
}

/// Runs every active expert independently (concurrently when more than one)
/// and collects results in expert-id order. A failing handler produces a
/// failure entry instead of aborting the others.
pub fn execute<T: Scalar>(
    decision: &RoutingDecision<T>,
    registry: &ExpertRegistry<T>,
    input: &ExpertInput<'_, T>,
) -> Result<ExecutionReport<T>> {
    assert!(
        !decision.active.is_empty(),
        "routing decisions always activate at least one expert"
    );
    let mut jobs = Vec::with_capacity(decision.active.len());
    for &id in &decision.active {
        let entry = registry
            .get(id)
            .ok_or_else(|| Error::Routing(format!("no handler registered for expert {id}")))?;
        jobs.push((id, entry));
    }
    let mut results: Vec<(ExpertId, Result<ExpertResponse<T>>)> = if jobs.len() == 1 {
        let (id, (profile, handler)) = jobs[0];
        vec![(id, handler.handle(profile, input))]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|&(id, (profile, handler))| {
                    (id, scope.spawn(move || handler.handle(profile, input)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(id, h)| {
                    let r = h
                        .join()
                        .unwrap_or_else(|_| Err(Error::Backend(format!("expert {id} panicked"))));
                    (id, r)
                })
                .collect()
        })
    };
    results.sort_by_key(|(id, _)| *id);
    let mut report = ExecutionReport {
        outputs: Vec::new(),
        failures: Vec::new(),
    };
    for (expert, r) in results {
        match r {
            Ok(resp) => report.outputs.push(ExpertOutput {
                expert,
                draft: resp.draft,
                vector: resp.vector,
            }),
            Err(e) => {
                tracing::warn!(%expert, error = %e, "expert failed");
                report.failures.push(ExpertFailure {
                    expert,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Contribution<T> {
    pub expert: ExpertId,
    pub weight: T,
    pub draft: ResponseDraft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AggregatedOutput<T> {
    /// `Σ weight_i · h_i` when the experts produced vectors.
    pub combined: Option<Vector<T>>,
    /// Highest weight first; ties by expert id.
    pub contributions: Vec<Contribution<T>>,
}

impl<T: Scalar> AggregatedOutput<T> {
    /// Distinct sentences across contributions, in contribution order.
    pub fn sentences(&self) -> Vec<&crate::generation::DraftSentence> {
        let mut out: Vec<&crate::generation::DraftSentence> = Vec::new();
        for c in &self.contributions {
            for s in &c.draft.sentences {
                if !out.iter().any(|o| o.text == s.text) {
                    out.push(s);
                }
            }
        }
        out
    }

    pub fn text(&self) -> String {
        self.sentences()
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn citations(&self) -> BTreeSet<String> {
        self.sentences()
            .iter()
            .filter_map(|s| s.source.clone())
            .collect()
    }

    pub fn kg_appendix(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for line in self.contributions.iter().flat_map(|c| &c.draft.kg_appendix) {
            if !out.contains(line) {
                out.push(line.clone());
            }
        }
        out
    }

    /// Text followed by the KG appendix, one fact per line.
    pub fn render(&self) -> String {
        let mut out = self.text();
        for line in self.kg_appendix() {
            out.push('\n');
            out.push_str(&line);
        }
        out
    }

    pub fn weights(&self) -> Vec<(ExpertId, T)> {
        self.contributions
            .iter()
            .map(|c| (c.expert, c.weight))
            .collect()
    }
}

/// Gate-weighted combination of expert outputs. With `renormalize` the
/// weights of the experts present in `outputs` are rescaled to sum to one;
/// otherwise the raw gate probabilities are used (non-active experts simply
/// contribute nothing).
pub fn aggregate<T: Scalar>(
    g: &GatingDistribution<T>,
    outputs: &[ExpertOutput<T>],
    renormalize: bool,
) -> Result<AggregatedOutput<T>> {
    if outputs.is_empty() {
        return Err(Error::Aggregation("no expert outputs to aggregate".into()));
    }
    let mut seen = BTreeSet::new();
    for o in outputs {
        if o.expert.0 == 0 || o.expert.0 > g.len() {
            return Err(Error::Aggregation(format!(
                "expert {} outside the gating distribution",
                o.expert
            )));
        }
        if !seen.insert(o.expert) {
            return Err(Error::Aggregation(format!(
                "expert {} appears twice",
                o.expert
            )));
        }
    }
    let raw: Vec<T> = outputs.iter().map(|o| g.prob(o.expert)).collect();
    let weights = if renormalize { renormalized(&raw) } else { raw };

    let with_vec = outputs.iter().filter(|o| o.vector.is_some()).count();
    let combined = if with_vec == 0 {
        None
    } else if with_vec != outputs.len() {
        return Err(Error::Aggregation(
            "some experts returned vectors and some did not".into(),
        ));
    } else {
        let dim = outputs[0].vector.as_ref().map_or(0, Vector::dim);
        let mut acc = vec![T::zero(); dim];
        for (o, &w) in outputs.iter().zip(&weights) {
            let v = o.vector.as_ref().expect("checked above");
            check_dim(dim, v.dim()).map_err(|e| Error::Aggregation(e.to_string()))?;
            for (a, &x) in acc.iter_mut().zip(v.as_slice()) {
                *a += w * x;
            }
        }
        Some(Vector::new(acc)?)
    };

    let mut contributions: Vec<Contribution<T>> = outputs
        .iter()
        .zip(weights)
        .map(|(o, weight)| Contribution {
            expert: o.expert,
            weight,
            draft: o.draft.clone(),
        })
        .collect();
    contributions.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.expert.cmp(&b.expert))
    });
    Ok(AggregatedOutput {
        combined,
        contributions,
    })
}
