use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Manifest validation failure categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationKind {
    MissingFile,
    DimMismatch,
    MissingLabel,
    Schema,
}

impl fmt::Display for ValidationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValidationKind::MissingFile => "missing file",
            ValidationKind::DimMismatch => "dimension mismatch",
            ValidationKind::MissingLabel => "missing label",
            ValidationKind::Schema => "schema",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error ({kind}): {detail}")]
    Validation {
        kind: ValidationKind,
        detail: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(kind: ValidationKind, detail: impl Into<String>) -> Self {
        Error::Validation {
            kind,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 validation, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::NonFinite(_) | Error::DegenerateClustering(_) => 3,
            Error::Io { .. } => 4,
            Error::Invariant(_)
            | Error::DimMismatch(_)
            | Error::InvalidArgument(_)
            | Error::Format(_)
            | Error::Validation { .. } => 2,
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
