use qroute_core::CoreError;

use crate::config::ConfigError;
use crate::tape::TapeError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("no feasible action at decoding step {step}")]
    NoFeasibleAction { step: usize },

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty rollout buffer")]
    EmptyBuffer,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<qroute_qsim::QsimError> for ModelError {
    fn from(e: qroute_qsim::QsimError) -> Self {
        ModelError::Tape(e.into())
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
