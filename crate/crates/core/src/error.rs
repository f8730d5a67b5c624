use cardioreg_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid volume: {0}")]
    Volume(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("transform matrix is singular")]
    Singular,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (cases {cases:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        cases: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
