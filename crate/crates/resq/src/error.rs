//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene generation failed after {attempts} placement attempts")]
    Generation { attempts: usize },

    #[error("no unique query found for object {target} at tier {tier} or above")]
    AmbiguousTarget { target: usize, tier: u8 },

    #[error("unknown token {token:?}")]
    UnknownToken { token: String },

    #[error("cannot parse query {tokens:?}: {msg}")]
    QueryParse { tokens: Vec<String>, msg: String },

    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch for {field}: expected {expected}, got {got}")]
    ShapeMismatch {
        field: String,
        expected: String,
        got: String,
    },

    #[error("checkpoint version mismatch: file has version {found}, this build expects {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
