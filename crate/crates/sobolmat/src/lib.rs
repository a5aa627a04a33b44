//! Variance-based global sensitivity analysis for multi-output models, with
//! uncertainty quantification of the sensitivity estimates themselves.
//!
//! The central objects are *Sobol' matrices*: `L×L` extensions of the classical
//! Sobol' indices that apportion not just each output's variance but the whole
//! output correlation matrix to subsets of input axes. For an input subset
//! `m ⊆ {0, …, M-1}` the closed Sobol' matrix is
//!
//! ```text
//! S_m[l,l'] = V_m[l,l'] / (D[l] · D[l'])
//! ```
//!
//! where `V_m` is the covariance of the model's conditional means given the
//! axes in `m`, and `D[l]` is the total standard deviation of output `l`.
//! Diagonal entries are the classical closed Sobol' indices; `S_M` (all axes
//! retained) is the output correlation matrix.
//!
//! Rather than sampling the model directly, this crate computes `S_m` — and a
//! first-order Taylor estimate `T_m` of its standard error — from the first two
//! moments of a Gaussian-process surrogate fitted to model samples. Everything
//! needed for that pipeline lives here:
//!
//! - [`axes`] / [`tensor`]: axis-subset bookkeeping and small dense matrix /
//!   4-tensor containers with CSV serialization.
//! - [`testfuncs`]: the Ishigami, Sobol' G and Oakley benchmark functions, a
//!   9-output composite of them, output standardization and seeded noise.
//! - [`sampling`]: Latin-hypercube designs, two-fold splits and quantile
//!   transforms.
//! - [`surrogate`]: independent per-output GP regression with an RBF kernel,
//!   maximum-likelihood hyperparameter fitting, and bit-exact JSON round-trips.
//! - [`moments`]: marginalization engine turning the surrogate's mean and
//!   kernel into marginal means `μ_m`, marginal covariances `V_m` and the
//!   fourth-order covariance tensor `W` that drives the error estimates.
//! - [`gsa`]: assembly of `S`, total-effect and error matrices into
//!   [`gsa::SobolReport`]s, plus the result filter used by the benchmark.
//! - [`oracle`]: independent Monte-Carlo and nested-quadrature estimators used
//!   to cross-check the moment pipeline.
//! - [`bench`]: the benchmark harness sweeping sample count and noise level on
//!   a grid, with deterministic CSV output.
//! - [`quad`] / [`qmc`]: Gauss–Legendre rules and scrambled low-discrepancy
//!   sampling shared by the numerical backends.

pub mod axes;
pub mod bench;
pub mod error;
pub mod gsa;
pub mod moments;
pub mod oracle;
pub mod qmc;
pub mod quad;
pub mod sampling;
pub mod surrogate;
pub mod tensor;
pub mod testfuncs;

pub use axes::AxisSet;
pub use error::{Error, Result};
pub use gsa::SobolReport;
pub use sampling::DesignMatrix;
pub use surrogate::Surrogate;
pub use tensor::{Matrix, Tensor4};
