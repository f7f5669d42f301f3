use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("degenerate crop: bounding box does not intersect any masked-in voxel")]
    DegenerateCrop,

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("group analysis: {0}")]
    Group(String),

    #[error("not shear-free: a11*a12 + a21*a22 = {0:e}")]
    NotShearFree(f64),

    #[error("negative scaling branch: a11 = {a11}, a22 = {a22}")]
    NegativeScaling { a11: f64, a22: f64 },

    #[error("degenerate field: {0}")]
    DegenerateField(String),

    #[error("covariance factorization failed after nugget escalation")]
    Factorization,

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("uninformative region: {0}")]
    UninformativeRegion(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("no admissible correspondence: {0}")]
    NoAdmissibleCorrespondence(String),

    #[error("non-finite objective term: {0}")]
    NonFinite(&'static str),

    #[error("sampler: {0}")]
    Sampler(String),

    #[error("no lambda tuple converged:\n{0}")]
    NoConvergence(String),

    #[error("no single-cluster epsilon:\n{0}")]
    NoSingleClusterEpsilon(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
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
