use thiserror::Error;

/// Errors produced by the geometry, reachability, synthesis and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid ellipsoid: {0}")]
    InvalidEllipsoid(String),

    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("reach segment lost positive definiteness at t = {time}")]
    SegmentDegenerate { time: f64 },

    #[error("eroded constraint set is empty (margin {margin}); refine the partition")]
    InfeasiblePartition { margin: f64 },

    #[error("riccati iteration did not converge: {0}")]
    Stabilizability(String),

    #[error("state left every reach tube at t = {time} (distance {distance})")]
    SafetyViolationImminent { time: f64, distance: f64 },

    #[error("kernel approximation is empty: every direction chain was dropped")]
    EmptyKernel,

    #[error("initial state is not covered by the kernel approximation")]
    NotInKernel,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stale artifacts: {0}")]
    Stale(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
