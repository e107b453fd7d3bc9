use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown condition label {0}")]
    UnknownLabel(usize),
    #[error("forward cache does not match the parameters it is used with")]
    MissingCache,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{message} (diagnostic dump: {})", dump.display())]
    TrainingAborted { message: String, dump: PathBuf },
    #[error("plot input: {0}")]
    PlotInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
