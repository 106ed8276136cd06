//! Crate-wide error type.
//!
//! Every fallible operation reports a structured error naming the offending
//! dimension, channel, level, or parameter instead of panicking.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape algebra violation. `detail` names the offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or Inf values.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    /// Invertible 1x1 convolution weight is numerically singular.
    #[error("singular channel-mixing matrix: |det| = {det_abs:.3e}")]
    SingularMatrix { det_abs: f64 },

    /// Actnorm scale hit zero on some channel.
    #[error("actnorm scale is zero on channel {channel}")]
    ZeroScale { channel: usize },

    /// Squeeze/Haar need even spatial dims (forward) or channels % 4 == 0 (inverse).
    #[error("squeeze requires even spatial size, got {h}x{w}")]
    OddSpatial { h: usize, w: usize },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// Latent tensor handed to the inverse pass has the wrong shape.
    #[error("latent shape mismatch at level {level}: expected {expected}, got {got}")]
    LatentShape {
        level: usize,
        expected: String,
        got: String,
    },

    /// A gradient turned NaN; names the parameter so training logs are actionable.
    #[error("NaN gradient for parameter '{param}'")]
    NanGradient { param: String },

    /// Training loss became non-finite; the last good checkpoint is retained.
    #[error("non-finite loss at step {step}; last good checkpoint retained")]
    NanLoss { step: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Checkpoint/model architecture disagreement, naming the first offender.
    #[error("parameter '{name}' shape conflict: checkpoint has {got}, model expects {expected}")]
    ParamShapeConflict {
        name: String,
        expected: String,
        got: String,
    },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    /// An invariant-suite check found a violation.
    #[error("self-test '{check}' failed: {detail}")]
    SelfTest { check: &'static str, detail: String },

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
