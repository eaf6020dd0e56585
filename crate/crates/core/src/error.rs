use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by the numerical kernels and the run machinery.
#[derive(Debug, Error)]
pub enum Error {
    /// A field that must have zero vertical average does not.
    #[error("field is not vertically mean-free: residual {residual:.3e} exceeds {tolerance:.3e}")]
    MeanNotFree { residual: f64, tolerance: f64 },

    /// Poisson right-hand side with a nonzero horizontal mean.
    #[error("incompatible Poisson right-hand side: mean {mean:.3e} exceeds {tolerance:.3e}")]
    IncompatibleRhs { mean: f64, tolerance: f64 },

    #[error("singular linear system in implicit step at t = {t}")]
    SingularStep { t: f64 },

    #[error("time step {dt:.3e} exceeds the advective limit {limit:.3e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("blow-up detected at t = {t}: surrogate norm {norm:.3e} above threshold {threshold:.3e}")]
    BlowupDetected { t: f64, norm: f64, threshold: f64 },

    #[error("Picard iteration failed to contract after {iterations} iterations (last increment {increment:.3e})")]
    NoContraction { iterations: usize, increment: f64 },

    #[error("degenerate estimate: right-hand side vanishes while |<fg,h>| = {lhs:.3e}")]
    DegenerateRhs { lhs: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed snapshot {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
