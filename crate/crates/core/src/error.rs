use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("concept vocabulary is empty")]
    EmptyVocabulary,

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("key not found: {0}")]
    NotFound(String),

    #[error("corrupt data in {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("target distribution is not on the simplex (sum = {0})")]
    OffSimplex(f64),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds context limit {limit}")]
    Overlength { len: usize, limit: usize },

    #[error("frozen parameter received a gradient: {0}")]
    FrozenParameter(String),

    #[error("checkpoint was produced by a different configuration (expected {expected}, found {found})")]
    ResumeMismatch { expected: String, found: String },

    #[error("missing teacher embedding for region {0}")]
    MissingEmbedding(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),
}
