use std::path::PathBuf;

/// Errors produced by the training engine, controller, and experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value for `{path}`: {msg}")]
    ConfigField { path: String, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("csv row {row}: {msg}")]
    Csv { row: usize, msg: String },

    #[error("numerical divergence at iteration {t}")]
    NumericalDivergence { t: u64 },

    #[error("undefined parameters: {0}")]
    UndefinedParameters(String),

    #[error("budget too small for resource {resource}: remaining budget {remaining} after one round")]
    BudgetTooSmall { resource: usize, remaining: f64 },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("trace parse error at line {line}: {msg}")]
    Trace { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn field(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::ConfigField {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
