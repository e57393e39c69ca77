use qroute_core::CoreError;
use qroute_model::ModelError;

/// Failure of a command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable inputs or an invalid configuration.
    #[error("{0}")]
    Usage(String),

    /// A check ran to completion and did not pass.
    #[error("{0}")]
    Check(String),

    /// Training produced NaN or infinite values.
    #[error("{0}")]
    Numerical(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) | CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(c) => CliError::Usage(format!("invalid configuration: {c}")),
            ModelError::NonFinite(_) => CliError::Numerical(e.to_string()),
            ModelError::Checkpoint(_) => CliError::Usage(e.to_string()),
            ModelError::Core(c) => c.into(),
            ModelError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Usage(io.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(_)
            | CoreError::Parse { .. }
            | CoreError::Config(_)
            | CoreError::Domain(_)
            | CoreError::InvalidInstance(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
