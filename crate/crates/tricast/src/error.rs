//! Crate-wide error type with a coarse classification used by callers
//! (notably the CLI) to map failures onto exit statuses.

use std::path::PathBuf;

use chrono::NaiveDate;

/// Coarse failure class. `Data` covers everything attributable to the input
/// (files, schemas, series too short); `Numeric` covers faults arising during
/// computation (NaN/Inf, divergence, singular systems, internal shape bugs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: Box<csv::Error>,
    },
    #[error("missing mandatory column `{column}`")]
    MissingColumn { column: String },
    #[error("{what}: zero parseable rows")]
    NoRows { what: String },
    #[error("row {row}: unparseable date `{raw}`")]
    InvalidDate { raw: String, row: usize },
    #[error("duplicate date {date}")]
    DuplicateDate { date: NaiveDate },
    #[error("bar {date} violates OHLC invariants: {detail}")]
    BarInvariant { date: NaiveDate, detail: String },
    #[error("column `{column}` starts with missing values; forward fill has no prior value")]
    LeadingMissing { column: &'static str },
    #[error("column `{column}` has no present values to fill from")]
    AllMissing { column: &'static str },
    #[error("{what}: need at least {needed} rows, got {got}")]
    TooShort {
        what: String,
        needed: usize,
        got: usize,
    },
    #[error("invalid configuration: {detail}")]
    BadConfig { detail: String },
    #[error("bundle does not match the feature matrix: {detail}")]
    SchemaMismatch { detail: String },
    #[error("corrupt checkpoint {path}: {detail}")]
    BadCheckpoint { path: PathBuf, detail: String },
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("negative error statistic in {context}")]
    NegativeMetric { context: String },
    #[error("{model} diverged at epoch {epoch} (non-finite loss)")]
    Diverged { model: String, epoch: usize },
    #[error("singular normal equations in {context}")]
    SingularSystem { context: String },
    #[error("percentage error undefined: actual value at position {index} is zero")]
    ZeroActual { index: usize },
    #[error("zero variance in {context}")]
    ZeroVariance { context: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::Csv { .. }
            | Error::MissingColumn { .. }
            | Error::NoRows { .. }
            | Error::InvalidDate { .. }
            | Error::DuplicateDate { .. }
            | Error::BarInvariant { .. }
            | Error::LeadingMissing { .. }
            | Error::AllMissing { .. }
            | Error::TooShort { .. }
            | Error::BadConfig { .. }
            | Error::SchemaMismatch { .. }
            | Error::BadCheckpoint { .. }
            | Error::ZeroVariance { .. }
            | Error::ZeroActual { .. } => ErrorKind::Data,
            Error::ShapeMismatch { .. }
            | Error::NonFinite { .. }
            | Error::NegativeMetric { .. }
            | Error::Diverged { .. }
            | Error::SingularSystem { .. } => ErrorKind::Numeric,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
