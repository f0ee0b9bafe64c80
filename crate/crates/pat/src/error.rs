use thiserror::Error;

#[derive(Error, Debug)]
pub enum PatError {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: String, expected: &'static str },
    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("truncated or oversized payload in {path}")]
    Truncated { path: String },
    #[error("checkpoint/config mismatch on field `{0}`")]
    CheckpointMismatch(String),
    #[error("infeasible placement: {0}")]
    InfeasiblePlacement(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PatError>;
