use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("backward called on a node that was never computed")]
    NoForward,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
