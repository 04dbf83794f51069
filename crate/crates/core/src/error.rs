use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("explicit step {dt_sub} exceeds the stability bound {bound} (increase substeps_per_node)")]
    StabilityViolation { dt_sub: f64, bound: f64 },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("reference field has zero norm")]
    ZeroReference,
    #[error("requested rank {requested} exceeds the available rank {available}")]
    RankTooLarge { requested: usize, available: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("forward cache is stale; relinearize before applying the Jacobian")]
    StaleCache,
    #[error("Lanczos broke down and could not be restarted")]
    LanczosBreakdown,
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("array hash mismatch for {0}")]
    HashMismatch(String),
    #[error("array payload truncated for {0}")]
    Truncated(String),
    #[error("malformed array header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
