//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic / not a supported NIfTI-1 single file: {0}")]
    BadMagic(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },

    #[error("unsupported format version {0}")]
    VersionMismatch(u16),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("grid too small along the phase-encode axis")]
    GridTooSmall,

    #[error("displacement field is not invertible (1 + dd/dy <= 0 at column x={x}, z={z})")]
    NonInvertibleField { x: usize, z: usize },

    #[error("mask is empty")]
    EmptyMask,

    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),

    #[error("degenerate intensity distribution: {0}")]
    DegenerateIntensity(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("spatial extent {extent} not divisible by {divisor}")]
    IndivisibleExtent { extent: usize, divisor: usize },

    #[error("non-finite gradient encountered")]
    NonFiniteGradient,

    #[error("non-finite values in input grid")]
    NonFiniteValues,

    #[error("non-finite loss in batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid specification: {0}")]
    SpecInvalid(String),

    #[error("too few subjects: {0}")]
    TooFewSubjects(usize),

    #[error("manifest error: {0}")]
    Manifest(String),
}
