use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("non-finite value produced by node `{node}` (id {id})")]
    NonFinite { node: String, id: usize },

    #[error("leaf `{0}` was not bound before forward")]
    UnboundLeaf(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("node {0} is not a leaf of this graph")]
    NotALeaf(usize),

    #[error("batch statistics need at least 2 examples, got {0}")]
    DegenerateBatch(usize),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("update would make parameter `{0}` non-finite")]
    NonFiniteParameter(String),

    #[error("non-finite loss in {0} pass")]
    NonFiniteLoss(&'static str),

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("bad IDX file: {0}")]
    Idx(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("ledger audit rejected: {0}")]
    Audit(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
