use thiserror::Error;

/// Errors raised anywhere in the slider pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unknown layer id `{0}`")]
    UnknownLayer(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("rank {rank} exceeds min(d, k) = {max} for layer `{layer}`")]
    Rank { layer: String, rank: usize, max: usize },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("scene validation failed: {0}")]
    Validation(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bad file magic: expected {0}")]
    Magic(String),

    #[error("checksum mismatch for blob `{0}`")]
    Checksum(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn range(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Range {
            what,
            detail: detail.into(),
        }
    }
}
