use serde::{Deserialize, Serialize};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Each variant maps onto exactly one
/// [`ErrorCode`] so callers outside the crate can branch on a closed set.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("cannot normalize a zero vector")]
    ZeroNorm,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("no embedding for {0}")]
    Lookup(String),

    #[error("knowledge graph is empty")]
    EmptyGraph,

    #[error("document index is empty")]
    EmptyIndex,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("no documents to ground the response on")]
    Grounding,

    #[error("illegal transition: {event} not allowed in state {from}")]
    IllegalTransition { from: String, event: String },

    #[error("role {actual} may not perform this action (requires {required})")]
    Authorization { required: String, actual: String },

    #[error("template error: {0}")]
    Template(String),

    #[error("unknown qualitative label {0:?}")]
    Mapping(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("unsupported snapshot format version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },

    #[error("policy update aborted: {0}")]
    UpdateAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Machine readable error codes carried by every non-2xx API response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Dimension,
    ZeroNorm,
    NonFinite,
    BackendUnreachable,
    Backend,
    Parse,
    Validation,
    Conflict,
    NotFound,
    Lookup,
    EmptyGraph,
    EmptyIndex,
    Degenerate,
    Routing,
    Aggregation,
    Grounding,
    IllegalTransition,
    Unauthenticated,
    Forbidden,
    Template,
    Mapping,
    Configuration,
    UndefinedMetric,
    Checksum,
    Version,
    UpdateAborted,
    UnsupportedMediaType,
    PayloadTooLarge,
    MethodNotAllowed,
    Io,
    Internal,
}

impl Error {
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::Dimension { .. } => ErrorCode::Dimension,
            Error::ZeroNorm => ErrorCode::ZeroNorm,
            Error::NonFinite(_) => ErrorCode::NonFinite,
            Error::BackendUnreachable(_) => ErrorCode::BackendUnreachable,
            Error::Backend(_) => ErrorCode::Backend,
            Error::Parse { .. } => ErrorCode::Parse,
            Error::Validation(_) => ErrorCode::Validation,
            Error::Conflict(_) => ErrorCode::Conflict,
            Error::NotFound(_) => ErrorCode::NotFound,
            Error::Lookup(_) => ErrorCode::Lookup,
            Error::EmptyGraph => ErrorCode::EmptyGraph,
            Error::EmptyIndex => ErrorCode::EmptyIndex,
            Error::Degenerate(_) => ErrorCode::Degenerate,
            Error::Routing(_) => ErrorCode::Routing,
            Error::Aggregation(_) => ErrorCode::Aggregation,
            Error::Grounding => ErrorCode::Grounding,
            Error::IllegalTransition { .. } => ErrorCode::IllegalTransition,
            Error::Authorization { .. } => ErrorCode::Forbidden,
            Error::Template(_) => ErrorCode::Template,
            Error::Mapping(_) => ErrorCode::Mapping,
            Error::Configuration(_) => ErrorCode::Configuration,
            Error::UndefinedMetric(_) => ErrorCode::UndefinedMetric,
            Error::Checksum(_) => ErrorCode::Checksum,
            Error::Version { .. } => ErrorCode::Version,
            Error::UpdateAborted(_) => ErrorCode::UpdateAborted,
            Error::Io(_) => ErrorCode::Io,
            Error::Json(_) => ErrorCode::Parse,
        }
    }

    /// True for errors caused by the caller's input rather than the engine.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::NonFinite(_) | Error::UpdateAborted(_) | Error::Backend(_)
        )
    }
}
