use thiserror::Error;

/// Errors raised by the library. Configuration problems carry the offending key path.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible plan: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InfeasiblePlan(Vec<crate::domain::Violation>),

    #[error("invalid intersection: {0}")]
    InvalidSpec(String),

    #[error("insufficient history: need at least {needed} observations, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("misaligned exogenous series: {0}")]
    MisalignedExog(String),

    #[error("grid too large: {0}")]
    GridTooLarge(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("bus error: {0}")]
    Bus(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
