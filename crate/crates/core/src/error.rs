use std::path::PathBuf;

use thiserror::Error;

use crate::trace::HeadId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("size mismatch in {what}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        what: String,
        expected: u64,
        found: u64,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("non-finite activation in trace {trace_id} at step {step}")]
    NonFinite { trace_id: String, step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("problem {problem_id} has no {missing} trace")]
    AssumptionViolated {
        problem_id: String,
        missing: &'static str,
    },

    #[error("no problem with both correct and incorrect traces for head {0}")]
    NoUsableProblems(HeadId),

    #[error("difference matrix for head {0} is identically zero")]
    ZeroDifference(HeadId),

    #[error("rank-deficient difference matrix: sigma_{k} = {sigma:e} < 1e-10, try a smaller k")]
    RankDeficient { k: usize, sigma: f64 },

    #[error("no correct traces available")]
    NoCorrectTraces,

    #[error("both classes are required, got only {0}")]
    SingleClass(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("head {0} is not available")]
    UnknownHead(HeadId),

    #[error("context overflow: {needed} positions exceed limit {limit}")]
    ContextOverflow { needed: usize, limit: usize },

    #[error("vector is not in the null space of the basis (|Bv| = {0:e})")]
    NotInNullSpace(f64),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
