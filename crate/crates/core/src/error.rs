use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("position {position} exceeds max_positions {max}")]
    Capacity { position: usize, max: usize },

    /// The cache is full and holds nothing that may be evicted.
    #[error("cache of window {window} is saturated with question tokens only")]
    OnlyQuestionTokens { window: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("replay integrity: {0}")]
    Replay(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
