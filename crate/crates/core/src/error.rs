use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no model or filter available for fractional position ({dx}, {dy})")]
    MissingEntry { dx: u8, dy: u8 },

    #[error("empty training partition for position ({dx}, {dy}) at QP {qp}")]
    EmptyPartition { dx: u8, dy: u8, qp: u8 },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("BD-rate: {0}")]
    BdRate(String),

    #[error("malformed YUV file: expected a multiple of {frame_size} bytes, found {actual}")]
    YuvSize { frame_size: u64, actual: u64 },

    #[error("frame index {index} out of range ({count} frames)")]
    FrameIndex { index: usize, count: usize },

    #[error("bad container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
