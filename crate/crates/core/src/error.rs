use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid variable handle {0}")]
    UnknownVar(usize),

    #[error("image resolution mismatch: expected {expected_h}x{expected_w}, got {actual_h}x{actual_w}")]
    Resolution {
        expected_h: usize,
        expected_w: usize,
        actual_h: usize,
        actual_w: usize,
    },

    #[error("empty point cloud passed to {0}")]
    EmptyCloud(&'static str),

    #[error("point dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),

    #[error("unsupported character {0:?}; supported: A-Z, 1-9")]
    UnsupportedChar(char),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("degenerate pattern: {0} points (need at least 8)")]
    Degenerate(usize),

    #[error("mask is not binary at pixel {0}")]
    NonBinaryMask(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("image too small for SSIM window: {height}x{width}, need at least {window}")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("invalid weight bundle: {0}")]
    Bundle(String),

    #[error("image format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
