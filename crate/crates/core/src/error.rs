use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("numeric guard: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}: batch samples {batch_ids:?}, parameter norm {param_norm}")]
    NonFiniteLoss {
        epoch: usize,
        batch_ids: Vec<String>,
        param_norm: f64,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
