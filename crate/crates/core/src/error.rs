use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("channel mismatch: expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("transfer: {0}")]
    Transfer(String),

    #[error("equivalence check failed at layer `{layer}`: residual {residual:e} exceeds {tolerance:e}")]
    Equivalence {
        layer: String,
        residual: f64,
        tolerance: f64,
    },

    #[error("layer `{layer}`: {message}")]
    Layer { layer: String, message: String },

    #[error("format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("data: {0}")]
    Data(String),

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
