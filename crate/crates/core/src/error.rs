use thiserror::Error;

/// Errors shared across the modelling stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Cholesky factorization failed even after the jitter ladder was exhausted.
    /// `jitters` lists every diagonal boost that was attempted.
    #[error("covariance factorization failed (jitter ladder {jitters:?})")]
    Factorization { jitters: Vec<f64> },

    /// A predictive variance fell below the tolerated negative rounding band.
    #[error("predictive variance {value:e} below tolerance {tolerance:e}")]
    NegativeVariance { value: f64, tolerance: f64 },

    /// The objective turned non-finite during optimization. The trace holds
    /// the last accepted (iteration, value) pairs for diagnosis.
    #[error("optimizer diverged: non-finite objective (trace {trace:?})")]
    OptimizerDiverged { trace: Vec<(usize, f64)> },

    #[error("search setup rejected: {0}")]
    SearchSetup(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Site file rejection with a 1-based line number where applicable.
    #[error("site data error at line {line}: {message}")]
    SiteData { line: usize, message: String },

    /// A cross-validation stage failed; `fold` is the held-out year index.
    #[error("{stage} failed on fold {fold}: {source}")]
    Stage {
        stage: &'static str,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
