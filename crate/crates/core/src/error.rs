use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller broke a documented precondition (bad action id, K < 2, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numerical routine failed beyond repair (e.g. Cholesky after the
    /// jitter ladder was exhausted). The message carries diagnostics.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The requested operation needs structure the input does not have.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A declared specification (environment, network shape, ...) is invalid.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
