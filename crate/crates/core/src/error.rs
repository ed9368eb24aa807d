use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("graph input `{0}` is not bound")]
    UnboundInput(String),

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown op `{0}`")]
    UnknownOp(String),

    #[error("invalid config `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("environment: {0}")]
    Env(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape { op: op.into(), detail: detail.into() }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { key: key.into(), msg: msg.into() }
    }

    /// True for failures caused by NaN/Inf arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. }) || matches!(self, Error::Training(msg) if msg.contains("non-finite"))
    }
}
