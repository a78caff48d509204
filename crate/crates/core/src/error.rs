use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("expected a scalar tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("every frame of the video is padded")]
    AllPadded,

    #[error("temporal capacity exceeded: need {needed} frames, capacity is {capacity}")]
    CapacityExceeded { needed: usize, capacity: usize },

    #[error("empty segmentation mask")]
    EmptyMask,

    #[error("no connected component found below threshold")]
    NoComponent,

    #[error("ellipse does not fit inside the frame: {0}")]
    EllipseOutOfFrame(String),

    #[error("R² is undefined: {0}")]
    UndefinedR2(&'static str),

    #[error("non-finite loss at epoch {epoch}, step {step} (batch seed {batch_seed})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch_seed: u64,
    },

    #[error("estimator failed on all {0} samples")]
    EstimatorFailed(usize),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
