use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing configuration fields: {}", .0.join(", "))]
    MissingFields(Vec<String>),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{} malformed line(s) in {path}: {}", .lines.len(), summarize_lines(.lines))]
    Malformed {
        path: PathBuf,
        lines: Vec<(usize, String)>,
    },

    #[error("class `{0}` has a single member; MAP@R needs at least two per class")]
    SingletonClass(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::MissingFields(_) => "missing_fields",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::Tokenizer(_) => "tokenizer",
            Error::Dataset(_) => "dataset",
            Error::Malformed { .. } => "malformed",
            Error::SingletonClass(_) => "singleton_class",
            Error::Checkpoint(_) => "checkpoint",
            Error::TrainingAborted { .. } => "training_aborted",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

fn summarize_lines(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .take(5)
        .map(|(n, msg)| format!("line {n}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}
