use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite gradient at layer {layer}, parameter {index}{}", epoch.map(|e| format!(" (epoch {e})")).unwrap_or_default())]
    NonFiniteGradient {
        epoch: Option<usize>,
        layer: usize,
        index: usize,
    },

    #[error("training diverged at stage {stage}, epoch {epoch}: loss {loss}")]
    Divergence { stage: usize, epoch: usize, loss: f64 },

    #[error("class {class} has no training samples")]
    EmptyClass { class: usize },

    #[error("non-finite logits for class {class} at sample {sample}")]
    NonFiniteLogits { class: usize, sample: usize },

    #[error("bad magic at byte 0: expected {expected:#010x}, found {actual:#010x}")]
    BadMagic { expected: u32, actual: u32 },

    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    #[error("label {label} at record {record} is out of range for {classes} classes")]
    LabelRange {
        record: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("missing checkpoint files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingCheckpoints(Vec<PathBuf>),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
