use thiserror::Error;

/// Errors raised anywhere in the theory or simulation pipeline.
#[derive(Debug, Error)]
pub enum DrfError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("Gaussian moment does not converge for {activation} at variance {variance}: {detail}")]
    DivergentMoment {
        activation: String,
        variance: f64,
        detail: String,
    },

    #[error("internal inconsistency: {0}")]
    Inconsistent(String),

    #[error("{solver} did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("spectral parameter {0} lies on or too close to the positive real axis")]
    Geometry(String),

    #[error("degenerate depth: {0}")]
    DegenerateDepth(String),

    #[error("degenerate variance in channel integral: rho - m^2/q = {0:e}")]
    DegenerateVariance(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DrfError>;

impl DrfError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DrfError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
