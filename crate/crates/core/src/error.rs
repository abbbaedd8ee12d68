use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// sigma sigma^T is singular or its condition number exceeds the cap.
    #[error("singular volatility at path {path:?}, node {node}: condition number {condition:e}")]
    Singular {
        path: Option<usize>,
        node: usize,
        condition: f64,
    },

    /// The perturbed volatility changes the kernel of the base volatility.
    #[error("kernel stability violated: {0}")]
    KernelStability(String),

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
