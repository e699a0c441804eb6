//! Spin-system optimal control toolkit: gradient-flow optimization of
//! unitary dynamics, Hessian-based noise robustness measures, and
//! multi-objective front construction.

pub mod config;
pub mod dynamics;
pub mod flow;
pub mod fronts;
pub mod linalg;
pub mod moea;
pub mod par;
pub mod report;
pub mod robustness;
pub mod spin;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("time grid mismatch: {0}")]
    GridMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("empty sampling interval")]
    EmptyInterval,
    #[error("invalid correlation kernel: {0}")]
    InvalidKernel(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("front point lies outside the hypervolume reference box")]
    OutsideReference,
    #[error("integrator step underflow at s = {0}")]
    StepUnderflow(f64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
