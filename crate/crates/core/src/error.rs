use thiserror::Error;

/// Errors raised by the analytics core.
#[derive(Debug, Error)]
pub enum RetainError {
    #[error("contradictory merge hints: `{key}` hinted into both `{first}` and `{second}`")]
    ContradictoryHints {
        key: String,
        first: String,
        second: String,
    },

    #[error("future activity: last event {last_event} is after as-of {as_of}")]
    FutureActivity { last_event: i64, as_of: i64 },

    #[error("invalid lifecycle policy: {0}")]
    InvalidPolicy(String),

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: duplicate event_id `{event_id}`")]
    DuplicateEvent { line: usize, event_id: String },

    #[error("line {line}: unknown event kind `{kind}`")]
    UnknownKind { line: usize, kind: String },

    #[error("authentication failed (HTTP {status}) on {endpoint}")]
    Auth { status: u16, endpoint: String },

    #[error("transport error on {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    #[error("parse error on {endpoint}: {message}")]
    Parse { endpoint: String, message: String },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid window: start {start} must be before end {end}")]
    InvalidWindow { start: i64, end: i64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient records: {0}")]
    InsufficientRecords(String),

    #[error("zero-variance covariate `{0}`")]
    ZeroVariance(String),

    #[error("missing feature `{0}`")]
    MissingFeature(String),

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("log-rank test needs exactly 2 groups, found {0}")]
    GroupCount(usize),

    #[error("all weights are zero")]
    ZeroWeights,

    #[error("unknown placeholder `{{{{{0}}}}}` in template")]
    UnknownPlaceholder(String),

    #[error("missing value for placeholder `{0}`")]
    MissingPlaceholder(String),

    #[error("invalid schedule time `{0}` (expected HH:MM)")]
    InvalidTime(String),

    #[error("unknown contributor `{0}`")]
    UnknownContributor(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unknown project `{0}`")]
    UnknownProject(String),

    #[error("unknown tag `{0}`")]
    UnknownTag(String),

    #[error("schedule `{0}` already exists")]
    DuplicateSchedule(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("unsupported document version {0}")]
    ModelVersion(u32),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = RetainError> = std::result::Result<T, E>;

impl RetainError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        RetainError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
