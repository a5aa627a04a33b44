//! Error type shared by every module in the crate.
//!
//! Variants split into two families that callers (notably the CLI) treat
//! differently: *usage* problems (shape mismatches, out-of-range arguments,
//! malformed subsets) and *numerical* failures (factorization breakdown,
//! zero-variance outputs, negative error estimates). [`Error::is_numerical`]
//! encodes the split.

use crate::axes::AxisSet;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An input coordinate left the unit cube.
    #[error("input coordinate {value} at axis {axis} lies outside [0, 1]")]
    Domain { axis: usize, value: f64 },

    /// Output `l` has (sample or marginal) variance indistinguishable from
    /// zero, so it cannot be standardized or normalized into a Sobol' matrix.
    #[error("output {output} has zero variance")]
    ZeroVariance { output: usize },

    /// A two-fold split needs an even number of rows.
    #[error("cannot split {rows} rows into two equal folds")]
    OddRowCount { rows: usize },

    /// Elementwise division hit a zero denominator.
    #[error("division by zero at matrix element ({l}, {lp})")]
    DivisionByZero { l: usize, lp: usize },

    /// Two tensors disagreed on shape.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// An axis index fell outside the ambient dimension.
    #[error("axis {axis} out of range for {ambient} input dimensions")]
    AxisOutOfRange { axis: usize, ambient: usize },

    /// Gram-matrix factorization failed even at the maximum jitter level.
    #[error("Gram factorization for output {output} failed at jitter {jitter:.3e}")]
    FactorizationFailure { output: usize, jitter: f64 },

    /// The marginal likelihood became NaN/inf during hyperparameter search.
    #[error("marginal log-likelihood is not finite for output {output}")]
    NonFiniteLikelihood { output: usize },

    /// A quadrature or Monte-Carlo evaluation failed to produce finite values.
    #[error("integration failure: {context}")]
    IntegrationFailure { context: String },

    /// The error-variance estimate `Q[l,l']` came out more negative than the
    /// round-off clamp tolerates — a symptom of a numerically unstable fit.
    #[error("negative error variance Q[{l},{lp}] = {value:.3e} beyond clamp threshold")]
    NegativeQ { l: usize, lp: usize, value: f64 },

    /// A requested axis subset is invalid for the model at hand.
    #[error("invalid axis subset {subset} for ambient dimension {ambient}")]
    InvalidSubset { subset: String, ambient: usize },

    /// Generic invalid-argument error for CLI-facing plumbing.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Constructor kept next to the type so call sites stay terse.
    pub(crate) fn invalid_subset(m: &AxisSet, ambient: usize) -> Self {
        Error::InvalidSubset {
            subset: format!("{m}"),
            ambient,
        }
    }

    /// True for failures of the numerics (as opposed to misuse of the API).
    ///
    /// The CLI maps numerical failures to exit code 2 and usage errors to 1.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroVariance { .. }
                | Error::DivisionByZero { .. }
                | Error::FactorizationFailure { .. }
                | Error::NonFiniteLikelihood { .. }
                | Error::IntegrationFailure { .. }
                | Error::NegativeQ { .. }
        )
    }
}
