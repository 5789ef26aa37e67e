use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("point is behind the camera (depth {depth:.3e} m)")]
    BehindCamera { depth: f64 },
    #[error("field of view must lie in (0, 180) degrees, got {0}")]
    FieldOfView(f64),
    #[error("index set is not a registered hand subtree")]
    UnknownSubtree,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("no consensus: {0}")]
    NoConsensus(String),
    #[error("under-constrained: {visible} visible keypoints, need at least {required}")]
    UnderConstrained { visible: usize, required: usize },
    #[error("non-finite residual at index {index}")]
    NonFinite { index: usize },
    #[error("optimizer diverged after {iterations} iterations")]
    Diverged {
        iterations: usize,
        last_finite: Vec<f64>,
    },
    #[error("missing keypoint: {0}")]
    MissingKeypoint(String),
    #[error("unknown handedness {0:?}, expected \"left\" or \"right\"")]
    Handedness(String),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
