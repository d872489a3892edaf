//! Error taxonomy shared by all modules.

use thiserror::Error;

/// Failure modes surfaced by simulation and statistics operations.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A caller passed vectors whose length disagrees with the model dimension.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// The drift returned NaN/inf; carries the state it was evaluated at.
    #[error("drift returned a non-finite value at step {step:?}, state {state:?}")]
    NonFiniteDrift { step: Option<usize>, state: Vec<f64> },

    /// An observable returned NaN/inf along the chain.
    #[error("observable returned non-finite value {value} at step {step}")]
    NonFiniteObservable { step: usize, value: f64 },

    /// The chain norm crossed the blow-up guard; the step size is too large
    /// for the model (or the model is not dissipative).
    #[error("trajectory diverged at step {step}: |state| = {norm:.3e} > {bound:.3e}")]
    Divergence { step: usize, norm: f64, bound: f64 },

    /// More than the tolerated fraction of ensemble replicas diverged.
    #[error("divergence budget exceeded: {diverged} of {total} replicas diverged")]
    DivergenceBudget { diverged: usize, total: usize },

    /// Invalid model or experiment parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// The bundle lacks an evaluator a term requires.
    #[error("bundle capability missing: {term} requires third derivatives of phi")]
    MissingThirdDerivative { term: &'static str },

    /// The Stein residual precheck failed: the bundle does not solve
    /// h - pi(h) = A phi on the trajectory's range, so the decomposition
    /// identity is not expected to hold.
    #[error(
        "mismatched bundle: Stein residual {max_residual:.3e} exceeds tolerance {tolerance:.3e}"
    )]
    MismatchedBundle { max_residual: f64, tolerance: f64 },

    /// Y_eta = 0: the gradient of phi vanished along the entire path.
    #[error("degenerate normalizer: Y_eta = 0")]
    DegenerateNormalizer,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Machine-readable category used by the CLI to pick an exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::DimensionMismatch { .. } => "config",
            Error::DivergenceBudget { .. } | Error::Divergence { .. } => "divergence",
            Error::MissingThirdDerivative { .. } => "capability",
            Error::MismatchedBundle { .. } => "mismatched_bundle",
            Error::NonFiniteDrift { .. } | Error::NonFiniteObservable { .. } => "non_finite",
            Error::DegenerateNormalizer => "degenerate",
        }
    }
}
