use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("singular timestep {t}: {what} is zero")]
    SingularTimestep { t: usize, what: &'static str },

    #[error("rejected range: {0}")]
    RejectedRange(String),

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("sampler diverged at timestep {t}")]
    SamplerDivergence { t: usize },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("incomplete manifest: {0}")]
    IncompleteManifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding failed: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }
}
