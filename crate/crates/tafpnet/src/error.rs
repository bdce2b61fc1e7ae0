use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree on a specific axis.
    #[error("{op}: {axis} axis mismatch: expected {expected}, got {got}")]
    AxisMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// Shape-level problem that is not a single-axis mismatch.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// An operator produced or received a NaN/Inf value.
    #[error("{op}: non-finite value at operator boundary")]
    NonFinite { op: &'static str },

    #[error("top-k selection: k={k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("backward: root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("training: {0}")]
    Train(String),

    /// Numerical failure worth a distinct exit path: NaN/Inf mid-training,
    /// gradient checks out of tolerance.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
