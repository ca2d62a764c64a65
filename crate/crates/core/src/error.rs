use thiserror::Error;

pub type Result<T, E = CrurError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CrurError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("rank error in {op}: {detail}")]
    Rank { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("capacity exceeded: {needed} items but only {available} roles")]
    Capacity { needed: usize, available: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("corpus generation error: {0}")]
    Generation(String),

    #[error("config error: {msg}")]
    Config { msg: String, keys: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CrurError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        CrurError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn rank(op: &'static str, detail: impl Into<String>) -> Self {
        CrurError::Rank {
            op,
            detail: detail.into(),
        }
    }
}
