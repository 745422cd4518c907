use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: field `{field}`: {message}")]
    Record {
        line: usize,
        field: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("duplicate uid(s): {}", .0.join(", "))]
    DuplicateUid(Vec<String>),

    #[error("train/test splits overlap on uid(s): {}", .0.join(", "))]
    SplitOverlap(Vec<String>),

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("candidate list is empty")]
    EmptyCandidates,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {layer}")]
    NonFinite { layer: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("rule `{rule_id}`: {message}")]
    RuleConfig { rule_id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample `{0}` is DEPRECATED and cannot be evaluated")]
    Deprecated(String),

    #[error("reports cover different uid sets")]
    UidMismatch,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Record {
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Record { .. } => "record",
            Error::Schema(_) => "schema",
            Error::DuplicateUid(_) => "duplicate_uid",
            Error::SplitOverlap(_) => "split_overlap",
            Error::Dimension { .. } => "dimension",
            Error::EmptyCandidates => "empty_candidates",
            Error::Empty(_) => "empty",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::RuleConfig { .. } => "rule_config",
            Error::Config(_) => "config",
            Error::Deprecated(_) => "deprecated",
            Error::UidMismatch => "uid_mismatch",
            Error::Invalid(_) => "invalid",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Wraps an error with the lifecycle stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
