use thiserror::Error;

/// Errors raised by tensor construction, primitives and the tape.
#[derive(Debug, Error)]
pub enum EngineError {
    /// A primitive was fed tensors whose shapes do not fit its rule.
    #[error("{primitive}: dimension error: {detail}")]
    Dimension { primitive: &'static str, detail: String },

    /// Invalid hyperparameter (eps, lr, momentum, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data fed to a primitive (e.g. label out of range).
    #[error("input error: {0}")]
    Input(String),

    /// API misuse (e.g. backward from a non-scalar root).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl EngineError {
    pub fn dim(primitive: &'static str, detail: impl Into<String>) -> Self {
        EngineError::Dimension { primitive, detail: detail.into() }
    }
}
