//! Crate-wide error type and result alias.

/// Errors surfaced by tensor primitives, model code, IO and the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A structurally valid request with inconsistent settings (bad groups,
    /// unknown config key, fraction out of range, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A documented contract was violated (non-scalar loss, frozen weights
    /// changed, simplex violation, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A primitive produced NaN or Inf.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    /// A file did not parse as the expected format.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    /// An analytic gradient disagreed with the finite-difference oracle.
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: gradient-check failures are 2,
    /// everything else is 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Gradcheck(_) => 2,
            _ => 1,
        }
    }
}
