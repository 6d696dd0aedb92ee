use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("size overflow: {0}")]
    Overflow(String),

    #[error("normal matrix is singular at ridge {ridge}; use a positive ridge")]
    SingularNormalMatrix { ridge: f64 },

    #[error("memory horizon exceeds cap {cap}: tail({cap}) = {tail} > {eps}")]
    HorizonExceeded { cap: usize, tail: f64, eps: f64 },

    #[error("quadrature error budget {budget:e} exceeds {limit:e}")]
    QuadratureBudget { budget: f64, limit: f64 },

    #[error("invalid Fourier profile: {0}")]
    InvalidProfile(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
