use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: need {needed} samples, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("degenerate entropy range: en_min {en_min} >= en_max {en_max}")]
    DegenerateRange { en_min: f64, en_max: f64 },

    #[error("rule input missing: {0}")]
    MissingFeatures(&'static str),

    #[error("size budget {t} outside [1, {num_labels}]")]
    InvalidBudget { t: usize, num_labels: usize },

    #[error("volume budget must be positive, got {0}")]
    InvalidVolume(f64),

    #[error("optimal transform requires a tail-probability oracle")]
    MissingOracle,

    #[error("transform undefined at an infinite threshold")]
    InfiniteThreshold,

    #[error("all transformed scores are zero; the e-variable denominator vanishes")]
    ZeroMass,

    #[error("transform value at the threshold must be positive, got {0}")]
    NonpositiveDenominator(f64),

    #[error("zero denominator h(w) on draw {draw}")]
    ZeroDenominator { draw: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("at calibration position {i}, candidate label {y:?}: {source}")]
    At {
        i: usize,
        y: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attaches the failing (i, y) coordinates of the symmetric-score grid.
    pub fn at(self, i: usize, y: Option<usize>) -> Error {
        Error::At {
            i,
            y,
            source: Box::new(self),
        }
    }
}
