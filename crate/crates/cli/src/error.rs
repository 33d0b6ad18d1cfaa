use vinpaint_core::Error as CoreError;

/// Failure classes with stable exit statuses.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Argument(_) | CoreError::Range(_) => CliError::Config(msg),
            CoreError::Validation(_) | CoreError::Format(_) | CoreError::Io(_) => CliError::Input(msg),
            CoreError::Numeric(_) | CoreError::UndefinedMetric(_) => CliError::Numeric(msg),
            CoreError::Lookup(_) | CoreError::State(_) => CliError::Internal(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Output-side I/O failures are not the caller's input problem.
pub fn write_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("cannot write {}: {e}", path.display()))
}
