use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate dynamic range")]
    DegenerateRange,

    #[error("invalid scaling factor {0}: must be >= 1")]
    InvalidRatio(i64),

    #[error("invalid window size {0}: must be odd and >= 1")]
    InvalidWindow(usize),

    #[error("coordinate ({x}, {y}, {z}) outside grid {dims:?}")]
    OutOfBounds {
        x: f64,
        y: f64,
        z: f64,
        dims: [usize; 3],
    },

    #[error("region at origin {origin:?} with extent {extent:?} does not fit in volume {dims:?}")]
    RegionOutOfBounds {
        origin: [usize; 3],
        extent: [usize; 3],
        dims: [usize; 3],
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("volume {dims:?} is too small: {reason}")]
    TooSmall { dims: [usize; 3], reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("not an SRV1 file")]
    NotSrv1,

    #[error("not a checkpoint file")]
    NotCheckpoint,

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("declared dims {0:?} overflow")]
    DimsOverflow([u64; 3]),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}
