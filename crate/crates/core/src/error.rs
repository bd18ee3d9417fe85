use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid noise floor: self-noise power must be positive, got {0}")]
    InvalidNoiseFloor(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate constraint: {0}")]
    DegenerateConstraint(String),

    #[error("constraint matrix is rank deficient; linearly dependent columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("the feasible set is empty: {constraints} constraints exceed {max} filter coefficients")]
    InfeasibleByCount { constraints: usize, max: usize },

    #[error("parameter out of range: {0}")]
    Parameter(String),

    #[error("degenerate denominator in interaural transfer function")]
    DegenerateDenominator,

    #[error("average ITF error ratio undefined: every reference error is below the zero guard")]
    UndefinedRatio,

    #[error("empty frequency band: {0}")]
    EmptyBand(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("WAV error at {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("JSON error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
