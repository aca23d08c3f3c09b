use std::path::PathBuf;

use crate::dataset::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero vector at row {row}: cosine similarity is undefined")]
    ZeroVector { row: usize },

    #[error("anchor {anchor} has no candidate negatives")]
    NoNegatives { anchor: usize },

    #[error("anchor {anchor} reached the loss with an empty positive set")]
    EmptyPositives { anchor: usize },

    #[error("dataset has no labelled samples")]
    NoLabelled,

    #[error("dataset failed validation with {} violation(s): {}", .0.len(), summarize(.0))]
    InvalidDataset(Vec<Violation>),

    #[error("missing ground truth for sample {index}")]
    MissingTruth { index: usize },

    #[error("non-finite value at row {row}, column {column}")]
    NonFiniteValue { row: usize, column: usize },

    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { epoch: usize, what: String },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn summarize(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, also used to pick a process exit code.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "usage",
            Error::NonFinite { .. } => "numeric",
            _ => "data",
        }
    }
}
