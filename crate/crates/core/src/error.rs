use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

/// A single schema problem found while loading a problem file.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaIssue {
    /// Dotted path to the offending field, e.g. `utility.gamma`.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for SchemaIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not positive definite: pivot {index} is {pivot:e}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("covariance asymmetry {relative:e} (relative) exceeds the hard limit")]
    Asymmetric { relative: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ill-conditioned problem: {0}")]
    Conditioning(String),

    #[error("model validation failed: {}", summarize(.0))]
    Validation(Box<ValidationReport>),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema errors: {}", join_issues(.0))]
    Schema(Vec<SchemaIssue>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn dimension(what: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 1: validation failure, 2: numerical failure, 3: I/O or schema failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::NotPositiveDefinite { .. } | Error::Asymmetric { .. } => {
                1
            }
            Error::Conditioning(_) | Error::Domain(_) => 2,
            Error::Parameter(_) | Error::Dimension { .. } => 3,
            Error::Parse { .. } | Error::Schema(_) | Error::Io { .. } | Error::Serialization(_) => {
                3
            }
        }
    }
}

fn summarize(report: &ValidationReport) -> String {
    report
        .findings
        .iter()
        .map(|f| format!("[{}] {}", f.code, f.message))
        .collect::<Vec<_>>()
        .join("; ")
}

fn join_issues(issues: &[SchemaIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
