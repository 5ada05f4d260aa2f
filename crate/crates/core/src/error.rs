use chrono::NaiveDate;
use thiserror::Error;

/// Errors produced by the library.
///
/// Variants are grouped so that front ends can map them onto exit codes:
/// configuration problems, data problems and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown jurisdiction `{id}`; available: {}", available.join(", "))]
    UnknownJurisdiction { id: String, available: Vec<String> },

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("validation error at row {row}: {msg}")]
    Validation { row: usize, msg: String },

    #[error("duplicate key {date} hour {hour} at row {row}")]
    DuplicateKey {
        date: NaiveDate,
        hour: u8,
        row: usize,
    },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("GPD fit failed ({side} tail, {n} exceedances): {msg}")]
    Fit {
        side: &'static str,
        n: usize,
        msg: String,
    },

    #[error("fit failed for {label}: {source}")]
    FitAt {
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("engine corrupted: {0}")]
    EngineCorrupt(String),

    #[error("rejected day {date}: {reason}")]
    RejectedDay { date: NaiveDate, reason: String },

    #[error("empty scenario batch")]
    EmptyBatch,

    #[error("data coverage error: {0}")]
    Coverage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Coarse classification used by the CLI for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnknownJurisdiction { .. } | Error::Layout(_) => {
                ErrorKind::Config
            }
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::DuplicateKey { .. }
            | Error::Alignment(_)
            | Error::InsufficientData(_)
            | Error::RejectedDay { .. }
            | Error::EmptyBatch
            | Error::Coverage(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Serde(_) => ErrorKind::Data,
            Error::Degenerate(_)
            | Error::Fit { .. }
            | Error::Domain(_)
            | Error::Singular(_)
            | Error::EngineCorrupt(_) => ErrorKind::Numerical,
            Error::FitAt { source, .. } => source.kind(),
        }
    }

    /// Wraps the error with the name of what was being processed.
    pub fn at(self, label: impl Into<String>) -> Error {
        Error::FitAt {
            label: label.into(),
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
