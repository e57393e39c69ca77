use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QsimError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("state norm² drifted to {norm_sqr}")]
    NumericalDrift { norm_sqr: f64 },

    #[error("invalid circuit configuration: {0}")]
    Config(String),
}

pub type Result<T, E = QsimError> = std::result::Result<T, E>;
