use thiserror::Error;

/// Errors raised by the routing core.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid route: {0}")]
    InvalidRoute(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("state is terminal; no further actions are defined")]
    TerminalState,

    #[error("action {action} is masked in the current state")]
    IllegalAction { action: usize },

    #[error("episode is not complete")]
    IncompleteEpisode,

    #[error("instance has {customers} customers; exact search supports at most {max}")]
    TooLarge { customers: usize, max: usize },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
