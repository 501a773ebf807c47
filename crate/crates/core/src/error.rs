use thiserror::Error;

pub type Result<T> = std::result::Result<T, HsacnError>;

#[derive(Debug, Error)]
pub enum HsacnError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("entity has no reviews: {0}")]
    ColdEntity(String),
    #[error("unknown {kind} id `{id}`")]
    Lookup { kind: &'static str, id: String },
    #[error("corpus too small: {0} interactions (need at least 10)")]
    CorpusTooSmall(usize),
    #[error("divergence: non-finite gradient in `{0}`")]
    Divergence(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
