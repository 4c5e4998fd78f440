//! HTTP/JSON API over [`lexmoe_core::engine::Engine`].
//!
//! Every route except `/v1/healthz` needs `Authorization: Bearer <token>`;
//! tokens map to workflow roles in the configuration. Request bodies must be
//! `application/json`. Mutating requests are appended to the journal (when
//! one is configured) before they are applied.

mod error;
mod journal;

use std::path::Path;
use std::sync::Arc;

use axum::extract::{FromRequest, FromRequestParts, Path as UrlPath, Request, State};
use axum::http::request::Parts;
use axum::http::{header, Method};
use axum::routing::{get, post};
use axum::{Json, Router};
use lexmoe_core::config::{AuthConfig, Config};
use lexmoe_core::engine::{Engine, EngineMetrics, ExpertInfo, FeedbackReceipt, QueryOutcome, ReviewQueueItem, UpdateSummary};
use lexmoe_core::error::ErrorCode;
use lexmoe_core::rlhf::FeedbackRecord;
use lexmoe_core::taxonomy::Role;
use lexmoe_core::workflow::{Actor, Case, CaseState, FinalDocument, HistoryEntry, Verdict};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use error::{status_for, ApiError, ErrorBody, ErrorDetail, ServeError};
pub use journal::{read_journal, Journal, JournalEntry};

pub struct AppState {
    pub engine: Arc<Engine>,
    pub auth: AuthConfig,
    pub journal: Option<Journal>,
    pub max_body_bytes: usize,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> lexmoe_core::Result<Self> {
        let cfg = engine.config();
        let journal = cfg.service.journal.as_deref().map(Journal::open).transpose()?;
        Ok(Self {
            auth: cfg.auth.clone(),
            max_body_bytes: cfg.service.max_body_bytes,
            journal,
            engine,
        })
    }

    fn journal(&self, caller: &Caller, method: &str, path: &str, body: &serde_json::Value) -> Result<(), ApiError> {
        if let Some(j) = &self.journal {
            j.append(caller.role, method, path, body.clone())
                .map_err(|e| ApiError::internal(format!("journal write failed: {e}")))?;
        }
        Ok(())
    }
}

type Shared = Arc<AppState>;

/// Authenticated caller, from the bearer token.
#[derive(Debug, Clone)]
pub struct Caller {
    pub role: Role,
    pub token_hint: String,
}

impl Caller {
    fn actor(&self) -> Actor {
        Actor::new(self.role, format!("{}:{}", self.role, self.token_hint))
    }

    fn require(&self, allowed: &[Role]) -> Result<(), ApiError> {
        if allowed.contains(&self.role) {
            Ok(())
        } else {
            let names: Vec<&str> = allowed.iter().map(|r| r.as_str()).collect();
            Err(ApiError::forbidden(format!(
                "role {} may not call this endpoint (requires {})",
                self.role,
                names.join(" or ")
            )))
        }
    }
}

impl FromRequestParts<Shared> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Shared) -> Result<Self, ApiError> {
        let value = parts
            .headers
            .get(header::AUTHORIZATION)
            .ok_or_else(|| ApiError::unauthenticated("missing bearer token"))?;
        let token = value
            .to_str()
            .ok()
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or_else(|| ApiError::unauthenticated("malformed authorization header"))?;
        let role = state
            .auth
            .role_for(token)
            .ok_or_else(|| ApiError::unauthenticated("unknown token"))?;
        Ok(Caller {
            role,
            token_hint: token.chars().take(4).collect(),
        })
    }
}

/// JSON body that also keeps the raw value for the journal. An empty body
/// without a content type reads as `{}`.
pub struct JsonBody<T> {
    pub value: T,
    pub raw: serde_json::Value,
}

impl<T: DeserializeOwned> FromRequest<Shared> for JsonBody<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &Shared) -> Result<Self, ApiError> {
        let content_type = req
            .headers()
            .get(header::CONTENT_TYPE)
            .map(|v| v.to_str().unwrap_or("").to_owned());
        let bytes = axum::body::to_bytes(req.into_body(), state.max_body_bytes)
            .await
            .map_err(|_| {
                ApiError::new(
                    status_for(ErrorCode::PayloadTooLarge),
                    ErrorCode::PayloadTooLarge,
                    format!("body exceeds {} bytes", state.max_body_bytes),
                )
            })?;
        let bytes: &[u8] = match &content_type {
            None if bytes.is_empty() => b"{}",
            Some(ct) if is_json(ct) => &bytes,
            other => {
                return Err(ApiError::new(
                    status_for(ErrorCode::UnsupportedMediaType),
                    ErrorCode::UnsupportedMediaType,
                    format!("expected application/json, got {}", other.as_deref().unwrap_or("no content type")),
                ))
            }
        };
        let parse = |e: serde_json::Error| ApiError::new(status_for(ErrorCode::Parse), ErrorCode::Parse, format!("invalid body: {e}"));
        let raw: serde_json::Value = serde_json::from_slice(bytes).map_err(parse)?;
        let value = T::deserialize(&raw).map_err(parse)?;
        Ok(Self { value, raw })
    }
}

fn is_json(content_type: &str) -> bool {
    let essence = content_type.split(';').next().unwrap_or("").trim().to_ascii_lowercase();
    essence == "application/json" || (essence.starts_with("application/") && essence.ends_with("+json"))
}

/// Runs engine work off the async executor.
async fn blocking<R, F>(f: F) -> Result<R, ApiError>
where
    F: FnOnce() -> lexmoe_core::Result<R> + Send + 'static,
    R: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::internal(format!("worker failed: {e}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    /// One question per line.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRequest {
    pub verdict: Verdict,
    #[serde(default)]
    pub notes: Option<String>,
    /// Replacement answer text; omitted to keep the aggregated answer.
    #[serde(default)]
    pub edited_text: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalizeRequest {
    #[serde(default)]
    pub template: Option<String>,
}

/// Four-component rating of a case answer. The role comes from the token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub case_id: String,
    #[serde(default)]
    pub response_id: Option<String>,
    #[serde(default)]
    pub relevance: Option<f64>,
    #[serde(default)]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub compliance: Option<f64>,
    #[serde(default)]
    pub satisfaction: Option<f64>,
    #[serde(default)]
    pub qualitative_label: Option<String>,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdatePolicyRequest {
    /// Update even when the buffer has not reached the batch threshold.
    #[serde(default = "yes")]
    pub force: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdatePolicyResponse {
    pub updated: bool,
    pub update: Option<UpdateSummary>,
    pub policy_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub case_id: String,
    pub state: CaseState,
    pub questions: Vec<String>,
    pub answer: Option<String>,
    pub aggregated: Option<String>,
    pub citations: Vec<String>,
    pub review_notes: Vec<String>,
    pub diagnostics: Vec<String>,
    pub final_document: Option<FinalDocument>,
    pub history: Vec<HistoryEntry>,
    /// The complete case record.
    pub detail: Case<f64>,
}

impl From<Case<f64>> for CaseView {
    fn from(c: Case<f64>) -> Self {
        Self {
            case_id: c.id.clone(),
            state: c.state(),
            questions: c.questions.clone(),
            answer: c.reviewed.clone().or_else(|| c.aggregated.clone()),
            aggregated: c.aggregated.clone(),
            citations: c.citations(),
            review_notes: c.review_notes.clone(),
            diagnostics: c.diagnostics.clone(),
            final_document: c.final_document.clone(),
            history: c.history().to_vec(),
            detail: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueResponse {
    pub role: Role,
    pub items: Vec<ReviewQueueItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub documents: usize,
    pub policy_version: u64,
}

async fn query(State(s): State<Shared>, caller: Caller, body: JsonBody<QueryRequest>) -> Result<Json<QueryOutcome>, ApiError> {
    s.journal(&caller, "POST", "/v1/query", &body.raw)?;
    let engine = s.engine.clone();
    let actor = caller.actor();
    Ok(Json(blocking(move || engine.query(&body.value.text, &actor)).await?))
}

async fn get_case(State(s): State<Shared>, _caller: Caller, UrlPath(id): UrlPath<String>) -> Result<Json<CaseView>, ApiError> {
    Ok(Json(s.engine.case(&id)?.into()))
}

async fn review(
    State(s): State<Shared>,
    caller: Caller,
    UrlPath(id): UrlPath<String>,
    body: JsonBody<ReviewRequest>,
) -> Result<Json<CaseView>, ApiError> {
    caller.require(&[Role::Advisor])?;
    s.journal(&caller, "POST", &format!("/v1/cases/{id}/review"), &body.raw)?;
    let engine = s.engine.clone();
    let actor = caller.actor();
    let r = body.value;
    let case = blocking(move || engine.review(&id, &actor, r.verdict, r.notes, r.edited_text)).await?;
    Ok(Json(case.into()))
}

async fn finalize(
    State(s): State<Shared>,
    caller: Caller,
    UrlPath(id): UrlPath<String>,
    body: JsonBody<FinalizeRequest>,
) -> Result<Json<FinalDocument>, ApiError> {
    caller.require(&[Role::Paralegal])?;
    s.journal(&caller, "POST", &format!("/v1/cases/{id}/finalize"), &body.raw)?;
    let engine = s.engine.clone();
    let actor = caller.actor();
    Ok(Json(blocking(move || engine.finalize(&id, &actor, body.value.template.as_deref())).await?))
}

async fn feedback(State(s): State<Shared>, caller: Caller, body: JsonBody<FeedbackRequest>) -> Result<Json<FeedbackReceipt>, ApiError> {
    caller.require(&[Role::Advisor, Role::Paralegal])?;
    s.journal(&caller, "POST", "/v1/feedback", &body.raw)?;
    let f = body.value;
    let record = FeedbackRecord {
        response_id: f.response_id.unwrap_or_else(|| f.case_id.clone()),
        case_id: f.case_id,
        role: caller.role,
        relevance: f.relevance,
        accuracy: f.accuracy,
        compliance: f.compliance,
        satisfaction: f.satisfaction,
        qualitative_label: f.qualitative_label,
        comment: f.comment,
        timestamp: chrono::Utc::now(),
    };
    let engine = s.engine.clone();
    Ok(Json(blocking(move || engine.submit_feedback(record)).await?))
}

async fn review_queue(State(s): State<Shared>, caller: Caller) -> Result<Json<QueueResponse>, ApiError> {
    caller.require(&[Role::Advisor, Role::Paralegal])?;
    Ok(Json(QueueResponse {
        role: caller.role,
        items: s.engine.review_queue(Some(caller.role)),
    }))
}

async fn experts(State(s): State<Shared>, _caller: Caller) -> Json<Vec<ExpertInfo>> {
    Json(s.engine.experts())
}

async fn update_policy(
    State(s): State<Shared>,
    caller: Caller,
    body: JsonBody<UpdatePolicyRequest>,
) -> Result<Json<UpdatePolicyResponse>, ApiError> {
    caller.require(&[Role::Advisor])?;
    s.journal(&caller, "POST", "/v1/admin/update-policy", &body.raw)?;
    let engine = s.engine.clone();
    let force = body.value.force;
    let update = blocking(move || engine.update_policy(force)).await?;
    Ok(Json(UpdatePolicyResponse {
        updated: update.is_some(),
        update,
        policy_version: s.engine.policy().gate.version,
    }))
}

async fn metrics(State(s): State<Shared>, _caller: Caller) -> Json<EngineMetrics> {
    Json(s.engine.metrics())
}

async fn healthz(State(s): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        documents: s.engine.index().len(),
        policy_version: s.engine.policy().gate.version,
    })
}

async fn not_found(method: Method, uri: axum::http::Uri) -> ApiError {
    ApiError::new(status_for(ErrorCode::NotFound), ErrorCode::NotFound, format!("no route for {method} {}", uri.path()))
}

async fn method_not_allowed(method: Method, uri: axum::http::Uri) -> ApiError {
    ApiError::new(
        status_for(ErrorCode::MethodNotAllowed),
        ErrorCode::MethodNotAllowed,
        format!("{method} not allowed on {}", uri.path()),
    )
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/cases/{id}", get(get_case))
        .route("/v1/cases/{id}/review", post(review))
        .route("/v1/cases/{id}/finalize", post(finalize))
        .route("/v1/feedback", post(feedback))
        .route("/v1/review/queue", get(review_queue))
        .route("/v1/experts", get(experts))
        .route("/v1/admin/update-policy", post(update_policy))
        .route("/v1/metrics", get(metrics))
        .route("/v1/healthz", get(healthz))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(Arc::new(state))
}

/// Loads (or initializes) the engine, serves until Ctrl-C and writes the
/// snapshot on the way out when one is configured.
pub async fn serve(config: Config) -> Result<(), ServeError> {
    let addr = config.service.bind.clone();
    let snapshot = config.service.snapshot.clone();
    let engine = Arc::new(
        tokio::task::spawn_blocking(move || Engine::bootstrap(config))
            .await
            .map_err(|e| ServeError::Server(std::io::Error::other(e)))??,
    );
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServeError::Bind { addr: addr.clone(), source })?;
    tracing::info!(%addr, documents = engine.index().len(), "serving");
    let app = router(AppState::new(engine.clone())?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServeError::Server)?;
    if let Some(path) = snapshot {
        save_snapshot(&engine, &path)?;
    }
    Ok(())
}

pub fn save_snapshot(engine: &Engine, path: &Path) -> Result<(), ServeError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(lexmoe_core::Error::from)?;
        }
    }
    engine.save_snapshot(path)?;
    tracing::info!(path = %path.display(), "snapshot written");
    Ok(())
}
