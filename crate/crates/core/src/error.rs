use thiserror::Error;

/// Errors surfaced by the public library API.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("domain error in {context}: {message}")]
    Domain {
        context: &'static str,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered in {context} at step {step}")]
    NonFinite { context: &'static str, step: usize },

    #[error("data error for {path}: {message}")]
    Data { path: String, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for CoreError {
    fn from(e: image::ImageError) -> Self {
        CoreError::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
