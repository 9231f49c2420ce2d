use thiserror::Error;

use crate::planner::PlannerTree;

/// Errors raised anywhere in the planning and control stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("Euler-angle singularity: pitch {pitch:.6} rad is within the guard band of ±π/2")]
    EulerSingularity { pitch: f64 },

    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    #[error("non-finite value encountered in {0}")]
    NumericalOverflow(&'static str),

    #[error("invalid robot description: {0}")]
    InvalidDescription(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("internal numerical error: {0}")]
    Internal(String),

    #[error("start state is in collision")]
    StartInCollision,

    #[error("no path found after {iterations} iterations ({nodes} nodes in tree)")]
    NoPath {
        iterations: usize,
        nodes: usize,
        tree: Box<PlannerTree>,
    },

    #[error("diverged rollout: {0}")]
    DivergedRollout(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}
