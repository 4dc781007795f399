use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A source file could not be decoded. `context` names the offending
    /// record when one can be identified.
    #[error("parse error in {path}: {context}")]
    Parse { path: String, context: String },

    /// Annotations decoded but violated a dataset constraint.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// An operation was called with arguments that violate its contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A text sequence exceeded the encoder's token budget.
    #[error("token limit exceeded: {0}")]
    TokenLimit(String),

    /// The encoder backend rejected a request.
    #[error("encoder backend error: {0}")]
    Backend(String),

    /// An embedding required by a downstream stage was never computed.
    #[error("missing embedding for {0}")]
    MissingEmbedding(String),

    /// Training produced a non-finite loss or otherwise cannot continue.
    #[error("training aborted: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
