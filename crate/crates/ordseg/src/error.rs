//! Error type shared by every module in the crate.

use thiserror::Error;

/// Errors produced by construction, validation, numerics, I/O, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a structural invariant (shape, range, finiteness).
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration parameter is outside its allowed range.
    #[error("configuration error: {0}")]
    Config(String),

    /// A distance transform was requested for a mask with no true pixels.
    #[error("empty region: distance transform has no reference pixels")]
    EmptyRegion,

    /// An unclamped signed distance field was requested for a degenerate
    /// (all-inside or all-outside) region.
    #[error("unbounded field: degenerate region has no finite unclamped distances; clamp it first")]
    UnboundedField,

    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric failure (NaN/Inf) was detected during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The finite-difference oracle detected an inconsistency in its inputs.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Too few observations for a statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A synthetic scene cannot be generated with the requested parameters.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A dataset cannot be partitioned as requested.
    #[error("partition error: {0}")]
    Partition(String),

    /// Training failed (e.g. the loss diverged).
    #[error("training error: {0}")]
    Training(String),

    /// A file does not conform to one of the on-disk formats.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
