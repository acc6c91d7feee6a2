//! Linear algebra, scalar optimization and random streams.

mod linalg;
mod optimize;
mod rng;

pub use linalg::{check_symmetric, cholesky_solve, logdet_spd, Matrix, SpdFactor, Vector};
pub use optimize::{find_root_bisect, minimize_scalar_bounded, ScalarMin};
pub use rng::{draw_normal, draw_uniform, stream_id, RngStream, REPLICATES_PER_SCENARIO};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("objective is not finite at x = {at}")]
    NonFinite { at: f64 },
    #[error("invalid bracket [{lo}, {hi}]")]
    InvalidBracket { lo: f64, hi: f64 },
    #[error("no sign change on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },
}
