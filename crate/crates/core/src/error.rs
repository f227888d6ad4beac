use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("panel is empty: {0}")]
    EmptyPanel(String),

    #[error("nonstationary generator config: persistence {0} must lie in [0, 1)")]
    NonstationaryConfig(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {layer}")]
    Numeric { layer: String },

    #[error("no convergence after {iterations} iterations (KKT gap {kkt_gap:.3e})")]
    Convergence { iterations: usize, kkt_gap: f64 },

    #[error("every sweep trial diverged ({0} trials)")]
    SweepFailure(usize),

    #[error("NMSE undefined: {0}")]
    UndefinedNmse(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("misaligned predictions: {0}")]
    Misaligned(String),

    #[error("degenerate portfolio day {date}: gross return {gross}")]
    DegenerateDay { date: i32, gross: f64 },

    #[error("Sharpe ratio undefined: zero volatility")]
    ZeroVolatility,

    #[error("calendar mismatch: {0}")]
    CalendarMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures that came out of the numerics rather than from
    /// configuration or I/O. The CLI maps these onto its own exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric { .. }
                | Error::Convergence { .. }
                | Error::SweepFailure(_)
                | Error::UndefinedNmse(_)
                | Error::ZeroVariance(_)
                | Error::ZeroVolatility
                | Error::DegenerateDay { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
