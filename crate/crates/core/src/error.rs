use chrono::NaiveDate;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no observed compartment at time index {0}")]
    EmptyMask(usize),
    #[error("trajectory and observation grids differ: {0}")]
    GridMismatch(String),
    #[error("kernel matrix not positive definite (jitter reached {jitter:e})")]
    FactorizationFailure { jitter: f64 },
    #[error("every inner restart produced a non-finite value")]
    InnerOptFailure,
    #[error("every acquisition restart produced a non-finite value")]
    OptFailure,
    #[error("decoupling vector z selects no compartment")]
    ZeroZ,
    #[error("stage-2 loss diverged at step {step}")]
    Divergence { step: usize },
    #[error("country {0:?} not present in data file")]
    MissingCountry(String),
    #[error("series has gaps; missing dates: {}", fmt_dates(.0))]
    GapInSeries(Vec<NaiveDate>),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("config error at {field}: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_dates(dates: &[NaiveDate]) -> String {
    dates
        .iter()
        .map(|d| d.format("%Y-%m-%d").to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
