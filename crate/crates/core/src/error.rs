use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss term `{term}` is not finite")]
    NonFiniteLoss { term: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("training diverged at step {step}: {cause}")]
    Diverged { step: usize, cause: String, checkpoint: Option<std::path::PathBuf> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures caused by NaN/Inf rather than bad arguments or IO.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::Diverged { .. })
    }
}
