//! Causal structure discovery from learned continuous-time dynamics.
//!
//! The toolkit fits either a linear SEM (NOTEARS-style) or a neural-ODE /
//! continuous-normalizing-flow model to observational data under a smooth
//! acyclicity constraint, then reads the causal DAG out of the averaged
//! absolute input-Jacobian of the learned function.

pub mod acyclicity;
pub mod cli;
pub mod graphs;
pub mod learners;
pub mod ndtensor;
pub mod odeflow;
pub mod scm_datagen;

use learners::AlTraceRow;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A NaN/overflow surfaced inside a numeric routine.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Matrix factorization failed.
    #[error("decomposition failed: {0}")]
    Decomposition(String),
    /// The optimizer diverged; the trace up to the failure is attached.
    #[error("optimization failed: {msg}")]
    Optimization { msg: String, trace: Vec<AlTraceRow> },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
