use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every error names the subsystem it came from so the CLI can report the
/// failing stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric: shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric: non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("numeric: backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("numeric: node {node} references input {input} that does not precede it")]
    GraphOrder { node: usize, input: usize },

    #[error("numeric: parameter `{0}` is frozen and cannot be updated")]
    Frozen(String),

    #[error("text: caption has no maskable span under the selected policy")]
    NoKeywords,

    #[error("text: {0}")]
    Text(String),

    #[error("encoder: {0}")]
    Encoder(String),

    #[error("encoder: contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("trainer: invalid noise parameters: {0}")]
    InvalidNoise(String),

    #[error("trainer: no usable captions in corpus ({skipped} skipped for lack of keywords)")]
    EmptyCorpus { skipped: usize },

    #[error("trainer: {0}")]
    Trainer(String),

    #[error("trainer: {0} is not implemented")]
    NotImplemented(&'static str),

    #[error("retrieval: gallery index is empty")]
    EmptyIndex,

    #[error("retrieval: k must be at least 1, got {0}")]
    InvalidK(usize),

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("bench: {0}")]
    Bench(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io: json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the subsystem that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::NotScalar(_)
            | Error::GraphOrder { .. }
            | Error::Frozen(_) => "numeric-core",
            Error::NoKeywords | Error::Text(_) => "text-pipeline",
            Error::Encoder(_) | Error::BatchTooSmall(_) => "dual-encoder",
            Error::Checkpoint(_) => "checkpoint",
            Error::InvalidNoise(_) | Error::EmptyCorpus { .. } | Error::Trainer(_) | Error::NotImplemented(_) => {
                "smp-trainer"
            }
            Error::EmptyIndex | Error::InvalidK(_) | Error::Retrieval(_) => "retrieval-engine",
            Error::Bench(_) => "synth-bench",
            Error::Io { .. } | Error::Json(_) => "io",
        }
    }
}
