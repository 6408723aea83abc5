//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by graph construction, evaluation, solvers, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape algebra failed while building a graph node.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward evaluation produced a NaN or infinity.
    #[error("non-finite value in {op} node")]
    NonFinite { op: &'static str },

    /// `differentiate` was called on a node that is not scalar-valued.
    #[error("differentiate requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    /// Invalid architecture descriptor.
    #[error("invalid architecture: {0}")]
    Arch(String),

    /// Invalid argument to an operation (out-of-range subset size, bad batch, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The optimizer saw a non-finite objective or gradient at its entry point.
    #[error("non-finite {what} in optimizer at entry")]
    OptimizerNonFinite { what: &'static str },

    /// An attack run hit a non-finite total loss.
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    AttackDiverged { iteration: usize, detail: String },

    /// Malformed binary dataset input; offsets are from the start of the file.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    /// Malformed record in a fixed-record binary file.
    #[error("parse error in record {record}: {detail}")]
    Record { record: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
