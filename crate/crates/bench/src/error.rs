use thiserror::Error;

/// Exit statuses.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    /// A numerical or invariant check did not hold.
    #[error("check failed: {0}")]
    Check(String),

    #[error("config file {path}: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Core(#[from] sparsifiner_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Check(_) => EXIT_CHECK,
            CliError::Config { .. } | CliError::Io(_) | CliError::Csv(_) => EXIT_IO,
            CliError::Core(e) if e.is_format_error() => EXIT_IO,
            CliError::Core(_) => EXIT_CHECK,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
