// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("line {line}: non-numeric cell {value:?} in column {column:?}")]
    NonNumeric {
        line: u64,
        column: String,
        value: String,
    },

    #[error("series {id:?}: timestep {found} follows {previous}; timesteps must be consecutive")]
    NonConsecutive {
        id: String,
        previous: i64,
        found: i64,
    },

    #[error("series {id:?}, t={t}, feature {feature:?}: binary value {value} is not 0 or 1")]
    BinaryDomain {
        id: String,
        t: i64,
        feature: String,
        value: f64,
    },

    #[error("operation requires {expected:?} features but dataset is {found:?}")]
    WrongKind {
        expected: crate::FeatureKind,
        found: crate::FeatureKind,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("binary row at t={t} is partially missing; apply the binary missing rule first")]
    PartiallyMissingBinaryRow { t: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("log-likelihood became NaN at iteration {iteration}")]
    NanLoglik { iteration: usize },

    #[error("need at least {needed} individuals, found {found}")]
    TooFewIndividuals { needed: usize, found: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
