use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class {class} has zero points; drop the class from the manifest or set train.class_count_floor")]
    EmptyClass { class: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("pyramid level {level} has zero points")]
    EmptyLevel { level: usize },
    #[error("segment graph error: {0}")]
    Graph(String),
    #[error("gradient check failed at {location}: relative error {error:.3e} exceeds {tolerance:.1e}")]
    GradCheck {
        location: String,
        error: f64,
        tolerance: f64,
    },
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyClass { .. } => "empty_class",
            Error::Parse { .. } => "parse",
            Error::UnknownColumn(_) => "unknown_column",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::EmptyLevel { .. } => "empty_level",
            Error::Graph(_) => "graph",
            Error::GradCheck { .. } => "gradcheck",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }
}
