use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments (bad dimension, empty law, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Index outside the domain of a walk or table.
    #[error("domain error: {0}")]
    Domain(String),

    /// An offspring law failed validation.
    #[error("invalid offspring law: {0}")]
    Law(String),

    /// Requested series tolerance cannot be met at the given step count.
    #[error("tolerance {tol:e} unachievable at N={n}; need N >= {required}")]
    Tolerance { tol: f64, n: usize, required: usize },

    /// Malformed table or law file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
