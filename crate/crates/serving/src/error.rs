use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Core(#[from] seqrank_core::Error),

    #[error("invalid request: {0}")]
    BadRequest(String),

    #[error("server is shutting down")]
    Shutdown,

    #[error("queue full")]
    QueueFull,
}

pub type Result<T> = std::result::Result<T, ServeError>;
