use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("incompatible model: {0}")]
    IncompatibleModel(String),

    #[error("corrupt container: {0}")]
    Format(String),

    #[error("singular schedule: signal coefficient is zero at t={0}")]
    SingularSchedule(usize),

    #[error("numeric divergence at step {step}: {detail}")]
    NumericDivergence { step: usize, detail: String },

    #[error("non-finite loss at step {step}: term `{term}` = {value}")]
    NonFiniteLoss {
        step: usize,
        term: &'static str,
        value: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
