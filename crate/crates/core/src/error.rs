use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, ranges or lengths that do not fit together.
    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite gradient at flat index {index}")]
    NonFiniteGradient { index: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("sampling produced a non-finite value at t = {t}")]
    Sampling { t: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse error classes, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    MissingArtifact,
    Config,
    Numeric,
    Other,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::MissingArtifact => "missing_artifact",
            ErrorCategory::Config => "config",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Other => "other",
        }
    }
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::MissingArtifact(_) => ErrorCategory::MissingArtifact,
            Error::Config(_) => ErrorCategory::Config,
            Error::NonFiniteGradient { .. }
            | Error::Training(_)
            | Error::Numeric(_)
            | Error::Sampling { .. } => ErrorCategory::Numeric,
            Error::Stage { source, .. } => source.category(),
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => {
                ErrorCategory::MissingArtifact
            }
            _ => ErrorCategory::Other,
        }
    }
}
