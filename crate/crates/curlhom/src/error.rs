//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CurlhomError>;

/// Failure modes surfaced by the toolkit.
///
/// `Solver` and `Incompatible` carry enough numeric context to diagnose a
/// failed run from the error alone; the harness maps them to exit code 2,
/// everything else to exit code 1.
#[derive(Debug, Error)]
pub enum CurlhomError {
    #[error("grid error: {0}")]
    Grid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("coefficient model is not SPD at node {node:?}: min eigenvalue {eigenvalue:.3e}")]
    NotSpd { node: [usize; 3], eigenvalue: f64 },

    #[error("{stage}: no convergence after {iterations} iterations, relative residual {residual:.3e} (target {target:.3e})")]
    SolverStalled {
        stage: &'static str,
        iterations: usize,
        residual: f64,
        target: f64,
    },

    #[error("cell system incompatible: pairing residuals {pairing:?}, mean residual {mean:.3e} exceed {tol:.3e}")]
    Incompatible {
        pairing: [f64; 3],
        mean: f64,
        tol: f64,
    },

    #[error("grid under-resolves the oscillation: axis {axis} has {actual:.2} nodes per period, need at least {required}")]
    UnderResolved {
        axis: usize,
        actual: f64,
        required: usize,
    },

    #[error("divergence data incompatible with the right-hand side: relative defect {defect:.3e} exceeds {tol:.3e}")]
    DivergenceMismatch { defect: f64, tol: f64 },

    #[error("incommensurate sampling: {0}")]
    Incommensurate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}
