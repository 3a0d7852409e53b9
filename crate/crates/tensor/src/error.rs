use thiserror::Error;

/// Failures raised while recording or differentiating a graph.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: {axis} axis mismatch (expected {expected}, got {actual})")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Config { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn config(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Config {
        op,
        msg: msg.into(),
    }
}

pub(crate) fn check_rank(op: &'static str, shape: &[usize], expected: usize) -> Result<()> {
    if shape.len() != expected {
        return Err(TensorError::Rank {
            op,
            expected,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn check_dim(
    op: &'static str,
    axis: &'static str,
    expected: usize,
    actual: usize,
) -> Result<()> {
    if expected != actual {
        return Err(TensorError::Dimension {
            op,
            axis,
            expected,
            actual,
        });
    }
    Ok(())
}
