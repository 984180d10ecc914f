use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch while building the computation graph.
    #[error("shape error in `{op}`: {msg}")]
    Shape { op: &'static str, msg: String },

    /// An operation produced a NaN or infinite value.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// The requested node does not belong to the tape.
    #[error("node {node} is not on this tape (len {len})")]
    UnknownNode { node: usize, len: usize },

    /// Backward pass requested from a non-scalar node.
    #[error("gradients require a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A finite-difference probe evaluated to a non-finite value.
    #[error("finite-difference evaluation non-finite for parameter {param} entry {entry}")]
    FdNonFinite { param: String, entry: usize },

    /// One or more configuration constraints were violated.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    /// Malformed data file.
    #[error("data error in {path}: {msg}")]
    Data { path: String, msg: String },

    /// Training diverged.
    #[error("NaN loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    /// Checkpoint file is damaged or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub fn data(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
