use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate record id `{id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("line {line}: class label {label} is out of range for {num_classes} classes")]
    UnknownClass {
        line: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("line {line}: feature length {found} does not match expected {expected}")]
    FeatureLength {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}, column {col}: non-binary cell `{value}`")]
    NonBinaryCell {
        row: usize,
        col: usize,
        value: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no backend registered under `{0}`")]
    UnknownBackend(String),

    #[error("backend `{backend}` unreachable: {msg}")]
    BackendUnreachable { backend: String, msg: String },

    #[error("replay miss: no cache entry for key {0}")]
    ReplayMiss(String),

    #[error("malformed payload from backend `{backend}`: {msg}")]
    MalformedPayload { backend: String, msg: String },

    #[error("mock backend has no behavior for prompt `{0}`")]
    NoBehavior(String),

    #[error("embedding dimension drift: expected {expected}, got {found}")]
    DimensionDrift { expected: usize, found: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("interrupted: {0}")]
    Interrupted(String),

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("stage `{stage}` failed: {msg}")]
    Stage { stage: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors that must abort a stage rather than degrade to a flagged record.
    pub fn halts_stage(&self) -> bool {
        matches!(self, Error::ReplayMiss(_) | Error::UnknownBackend(_) | Error::Interrupted(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
