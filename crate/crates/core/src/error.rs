//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index ({i}, {j}, {k}) out of range for {d1}x{d2}x{d3} tensor")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        k: usize,
        d1: usize,
        d2: usize,
        d3: usize,
    },

    #[error("duplicate entry at ({i}, {j}, {k})")]
    DuplicateEntry { i: usize, j: usize, k: usize },

    #[error("sample size {m} exceeds tensor size {total}")]
    SampleTooLarge { m: usize, total: usize },

    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    #[error("kernel not supported by this solver: {0}")]
    UnsupportedKernel(String),

    #[error("linear system is singular: {0}")]
    SingularSystem(String),

    #[error("divergence detected: {0}")]
    Divergence(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}
