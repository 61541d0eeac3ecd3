use subjectcraft_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_CORRUPT: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::NumericDivergence { .. } | Error::NonFiniteLoss { .. } => EXIT_DIVERGENCE,
                Error::Format(_) => EXIT_CORRUPT,
                _ => EXIT_USAGE,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

macro_rules! usage {
    ($($arg:tt)*) => {
        $crate::error::CliError::Usage(format!($($arg)*))
    };
}
pub(crate) use usage;
