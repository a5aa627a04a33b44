//! Gaussian-process surrogate regression: one RBF-kernel GP per output.
//!
//! Each output `l` of a standardized design is modeled independently as a
//! zero-mean GP with an automatic-relevance RBF kernel on the unit cube,
//!
//! ```text
//! k_l(u, u') = σ²_f · exp( −½ Σ_j (u_j − u'_j)² / λ²_j ),
//! ```
//!
//! observed through iid Gaussian noise of variance `σ²_n`. The outputs share
//! the input design but nothing else, so the model's cross-output posterior
//! covariance is exactly zero; cross-output structure in downstream Sobol'
//! matrices arises solely from products of per-output posterior means.
//!
//! Hyperparameters `(λ, σ²_f, σ²_n)` are chosen per output by maximizing the
//! marginal log-likelihood
//!
//! ```text
//! log p(y | θ) = −½ yᵀK⁻¹y − ½ log|K| − N/2 · log 2π,   K = σ²_f R(λ) + σ²_n I,
//! ```
//!
//! with analytic gradients in log-parameter space,
//! `∂ log p/∂θ = ½ tr((ααᵀ − K⁻¹) ∂K/∂θ)` for `α = K⁻¹y`, via a box-projected
//! L-BFGS ascent restarted from a seeded log-uniform prior. The Gram matrix is
//! regularized by an escalating jitter when Cholesky factorization fails; a
//! model that cannot be factorized even at the maximum jitter is reported as a
//! [`FactorizationFailure`](crate::error::Error::FactorizationFailure) rather
//! than returning silent NaNs.
//!
//! The fitted [`Surrogate`] is immutable: prediction, posterior-kernel
//! evaluation and validation never mutate shared state, so it can be shared
//! freely across threads.

use std::fmt::Write as _;

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, Side};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::sampling::DesignMatrix;
use crate::tensor::{fmt_g17, Matrix};
use crate::testfuncs::mix64;

/// Bounds of the hyperparameter box, in natural (not log) units.
// The optimizer's search box. Targets are standardized to unit variance, so
// a sane signal variance is O(1); the cap leaves two orders of headroom. On
// the unit cube an RBF with λ = 10 is already constant-plus-linear to within
// a fraction of a percent — larger λ (or larger σ²_f, which the optimizer
// trades against λ to mimic polynomial trends) adds no modeling capacity,
// it only inflates the prior scale that downstream moment integrals must
// cancel against the data term, costing the digits those differences are
// read from. The λ floor guards the opposite corner: with λ well below
// the design's point spacing and the noise floor open, maximum likelihood
// prefers interpolating noise (each freed hyperparameter buys ≈ ½ nat of
// spurious fit) over attributing it to σ²_n. Structure finer than λ ≈ 1/20
// of the cube side is unresolvable at the design sizes this crate targets,
// so nothing legitimate lives below the floor. It also stays above the
// marginalization engine's supported minimum, so a fitted model is never
// rejected there.
const LENGTHSCALE_RANGE: (f64, f64) = (5e-2, 1e1);
const SIGNAL_VARIANCE_RANGE: (f64, f64) = (1e-6, 1e2);
const NOISE_VARIANCE_RANGE: (f64, f64) = (1e-8, 1e2);

/// Jitter escalation relative to the mean Gram diagonal: start at the base,
/// multiply by 10 until the cap, then give up.
const JITTER_BASE: f64 = 1e-8;
const JITTER_CAP: f64 = 1e-2;

/// Hyperparameters of one output's RBF kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfKernelParams {
    /// Per-axis lengthscales `λ_j > 0`.
    pub lengthscales: Vec<f64>,
    /// Prior marginal variance `σ²_f > 0`.
    pub signal_variance: f64,
    /// Observation noise variance `σ²_n ≥ 0`.
    pub noise_variance: f64,
}

impl RbfKernelParams {
    /// Validates positivity and finiteness of all fields.
    pub fn new(
        lengthscales: Vec<f64>,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::InvalidArgument(
                "kernel needs at least one lengthscale".into(),
            ));
        }
        for (axis, &l) in lengthscales.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Domain { axis, value: l });
            }
        }
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "signal variance must be positive and finite, got {signal_variance}"
            )));
        }
        if !(noise_variance.is_finite() && noise_variance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be non-negative and finite, got {noise_variance}"
            )));
        }
        Ok(Self { lengthscales, signal_variance, noise_variance })
    }

    /// Number of input axes this kernel covers.
    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Latent (noise-free) kernel value between two points.
    pub fn kernel(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut q = 0.0;
        for (j, lam) in self.lengthscales.iter().enumerate() {
            let d = (u[j] - v[j]) / lam;
            q += d * d;
        }
        self.signal_variance * (-0.5 * q).exp()
    }
}

/// Controls for the hyperparameter search.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Master seed; everything downstream is a pure function of it.
    pub seed: u64,
    /// Number of optimizer starts per output (the first is a fixed
    /// mid-range heuristic, the rest are drawn log-uniformly).
    pub restarts: u32,
    /// Iteration cap per start.
    pub max_iterations: u32,
    /// When the design has more rows than this, hyperparameters are
    /// optimized on a seeded row subset of this size; the final dual
    /// weights still use every row.
    pub max_hyperopt_points: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { seed: 0, restarts: 8, max_iterations: 200, max_hyperopt_points: 512 }
    }
}

/// One output's fitted model and diagnostics.
#[derive(Debug, Clone)]
pub struct OutputModel {
    /// Optimized kernel hyperparameters.
    pub params: RbfKernelParams,
    /// Dual weights `α = (K + jitter·I)⁻¹ y` over the full training set.
    pub dual_weights: Vec<f64>,
    /// Jitter that made the full-data Gram matrix factorizable.
    pub jitter: f64,
    /// Marginal log-likelihood at the optimum (on the optimization subset).
    pub log_marginal_likelihood: f64,
    /// Squared ratio of extreme Cholesky diagonal entries — a cheap lower
    /// bound on the Gram matrix's condition number.
    pub condition_estimate: f64,
    /// Accepted marginal log-likelihood values of the winning restart, in
    /// iteration order (non-decreasing by the line-search contract).
    pub mll_trace: Vec<f64>,
}

/// Independent per-output GP regression over a shared input design.
#[derive(Debug, Clone)]
pub struct Surrogate {
    inputs: Array2<f64>,
    models: Vec<OutputModel>,
    factors: Vec<Llt<f64>>,
}

/// Fits one GP per output of `design` by restarted maximum likelihood.
///
/// Deterministic per `options.seed`: the same design and options always
/// produce bitwise-identical hyperparameters and dual weights.
pub fn fit(design: &DesignMatrix, options: &FitOptions) -> Result<Surrogate> {
    let (n, m, l_outs) = (design.n(), design.m(), design.l());
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 training rows, got {n}"
        )));
    }
    let inputs = design.inputs();

    // Row subset used for hyperparameter optimization (all rows if small).
    let sub_rows: Vec<usize> = if n > options.max_hyperopt_points {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(mix64(options.seed ^ 0x5b5e_7a11));
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let mut take: Vec<usize> = idx[..options.max_hyperopt_points].to_vec();
        take.sort_unstable();
        take
    } else {
        (0..n).collect()
    };
    let sub = Array2::from_shape_fn((sub_rows.len(), m), |(i, j)| inputs[[sub_rows[i], j]]);
    let tables = DistanceTables::new(&sub);
    // Distance tables over the full training set, shared by the final
    // per-output factorizations (identical to the subset tables when no
    // subset was taken).
    let full_tables =
        if sub_rows.len() == n { None } else { Some(DistanceTables::new(inputs)) };
    let full_ref = full_tables.as_ref().unwrap_or(&tables);

    let mut models = Vec::with_capacity(l_outs);
    let mut factors = Vec::with_capacity(l_outs);
    for l in 0..l_outs {
        let y_sub: Vec<f64> = sub_rows.iter().map(|&i| design.outputs()[[i, l]]).collect();
        let (params, mll, trace) = fit_output(&tables, &y_sub, options, l)?;

        // Final factorization and dual weights on the full training set.
        let gram = full_ref.gram(&params);
        let (llt, jitter) = factor_with_jitter(gram, n).ok_or({
            Error::FactorizationFailure { output: l, jitter: JITTER_CAP }
        })?;
        let y_full = Mat::from_fn(n, 1, |i, _| design.outputs()[[i, l]]);
        let alpha = llt.solve(&y_full);
        let lf = llt.L();
        let (mut dmin, mut dmax) = (f64::INFINITY, 0.0_f64);
        for i in 0..n {
            dmin = dmin.min(lf[(i, i)]);
            dmax = dmax.max(lf[(i, i)]);
        }
        models.push(OutputModel {
            params,
            dual_weights: (0..n).map(|i| alpha[(i, 0)]).collect(),
            jitter,
            log_marginal_likelihood: mll,
            condition_estimate: (dmax / dmin) * (dmax / dmin),
            mll_trace: trace,
        });
        factors.push(llt);
    }
    Ok(Surrogate { inputs: inputs.clone(), models, factors })
}

impl Surrogate {
    /// Builds a surrogate directly from known hyperparameters and targets,
    /// solving only for the dual weights. Used to pose models with controlled
    /// hyperparameters (tests, synthetic studies) without an optimizer run.
    pub fn from_parts(
        inputs: Array2<f64>,
        targets: &Array2<f64>,
        params: Vec<RbfKernelParams>,
    ) -> Result<Self> {
        let (n, m) = (inputs.nrows(), inputs.ncols());
        if targets.nrows() != n || params.len() != targets.ncols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} rows and one parameter set per output"),
                got: format!("{} rows, {} outputs, {} parameter sets",
                    targets.nrows(), targets.ncols(), params.len()),
            });
        }
        let tables = DistanceTables::new(&inputs);
        let mut models = Vec::with_capacity(params.len());
        let mut factors = Vec::with_capacity(params.len());
        for (l, p) in params.into_iter().enumerate() {
            if p.input_dim() != m {
                return Err(Error::ShapeMismatch {
                    expected: format!("{m} lengthscales"),
                    got: format!("{}", p.input_dim()),
                });
            }
            let gram = tables.gram(&p);
            let (llt, jitter) = factor_with_jitter(gram, n).ok_or({
                Error::FactorizationFailure { output: l, jitter: JITTER_CAP }
            })?;
            let y = Mat::from_fn(n, 1, |i, _| targets[[i, l]]);
            let alpha = llt.solve(&y);
            models.push(OutputModel {
                params: p,
                dual_weights: (0..n).map(|i| alpha[(i, 0)]).collect(),
                jitter,
                log_marginal_likelihood: f64::NAN,
                condition_estimate: f64::NAN,
                mll_trace: Vec::new(),
            });
            factors.push(llt);
        }
        Ok(Self { inputs, models, factors })
    }

    /// Training inputs (N×M, unit cube).
    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    /// Number of training rows.
    pub fn training_points(&self) -> usize {
        self.inputs.nrows()
    }

    /// Input dimension `M`.
    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Output count `L`.
    pub fn output_count(&self) -> usize {
        self.models.len()
    }

    /// Per-output fitted models.
    pub fn models(&self) -> &[OutputModel] {
        &self.models
    }

    /// Applies `K_l⁻¹` (regularized Gram inverse of output `l`) to the
    /// columns of `rhs`.
    pub(crate) fn solve_gram(&self, l: usize, rhs: &Mat<f64>) -> Mat<f64> {
        self.factors[l].solve(rhs)
    }

    /// Posterior mean of every output at `points` (P×M in the unit cube),
    /// returned as P×L.
    pub fn predict_mean(&self, points: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_points(points)?;
        let p = points.nrows();
        let n = self.training_points();
        let mut out = Array2::zeros((p, self.output_count()));
        for (l, model) in self.models.iter().enumerate() {
            let mut row_buf = vec![0.0; self.input_dim()];
            let mut train_buf = vec![0.0; self.input_dim()];
            for i in 0..p {
                for (j, b) in row_buf.iter_mut().enumerate() {
                    *b = points[[i, j]];
                }
                let mut acc = 0.0;
                for t in 0..n {
                    for (j, b) in train_buf.iter_mut().enumerate() {
                        *b = self.inputs[[t, j]];
                    }
                    acc += model.params.kernel(&row_buf, &train_buf) * model.dual_weights[t];
                }
                out[[i, l]] = acc;
            }
        }
        Ok(out)
    }

    /// Posterior covariance of the latent mean functions between `u` (P×M)
    /// and `v` (P'×M): one P×P' block per output (cross-output blocks are
    /// identically zero under output independence).
    ///
    /// The noise variance is *not* included: this is the uncertainty of the
    /// mean function itself, which is what the moment pipeline integrates.
    pub fn posterior_kernel(&self, u: &Array2<f64>, v: &Array2<f64>) -> Result<Vec<Matrix>> {
        self.check_points(u)?;
        self.check_points(v)?;
        let (p, q) = (u.nrows(), v.nrows());
        let n = self.training_points();
        let mut blocks = Vec::with_capacity(self.output_count());
        for (l, model) in self.models.iter().enumerate() {
            let cross_u = self.cross_kernel(model, u);
            let cross_v = self.cross_kernel(model, v);
            // K⁻¹ k(X, v): solve on the N×P' matrix.
            let rhs = Mat::from_fn(n, q, |i, j| cross_v[(j, i)]);
            let sol = self.solve_gram(l, &rhs);
            let mut block = Matrix::zeros(p, q);
            let mut ub = vec![0.0; self.input_dim()];
            let mut vb = vec![0.0; self.input_dim()];
            for i in 0..p {
                for (j, b) in ub.iter_mut().enumerate() {
                    *b = u[[i, j]];
                }
                for k in 0..q {
                    for (j, b) in vb.iter_mut().enumerate() {
                        *b = v[[k, j]];
                    }
                    let mut reduction = 0.0;
                    for t in 0..n {
                        reduction += cross_u[(i, t)] * sol[(t, k)];
                    }
                    block[(i, k)] = model.params.kernel(&ub, &vb) - reduction;
                }
            }
            blocks.push(block);
        }
        Ok(blocks)
    }

    /// Per-output RMSE of the posterior mean against held-out targets, and
    /// the mean *predictive* standard deviation (latent variance plus noise
    /// variance) over the held-out inputs.
    pub fn validate(&self, held_out: &DesignMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
        if held_out.m() != self.input_dim() || held_out.l() != self.output_count() {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "{}×{} design",
                    self.input_dim(),
                    self.output_count()
                ),
                got: format!("{}×{}", held_out.m(), held_out.l()),
            });
        }
        let p = held_out.n();
        let mean = self.predict_mean(held_out.inputs())?;
        let mut rmse = vec![0.0; self.output_count()];
        let mut mean_sd = vec![0.0; self.output_count()];
        for (l, model) in self.models.iter().enumerate() {
            let cross = self.cross_kernel(model, held_out.inputs());
            let rhs = Mat::from_fn(self.training_points(), p, |i, j| cross[(j, i)]);
            let sol = self.solve_gram(l, &rhs);
            let mut sse = 0.0;
            let mut sd_acc = 0.0;
            for i in 0..p {
                let err = mean[[i, l]] - held_out.outputs()[[i, l]];
                sse += err * err;
                let mut reduction = 0.0;
                for t in 0..self.training_points() {
                    reduction += cross[(i, t)] * sol[(t, i)];
                }
                let latent = (model.params.signal_variance - reduction).max(0.0);
                sd_acc += (latent + model.params.noise_variance).sqrt();
            }
            rmse[l] = (sse / p as f64).sqrt();
            mean_sd[l] = sd_acc / p as f64;
        }
        Ok((rmse, mean_sd))
    }

    /// Cross-kernel matrix `k(points, X)` for one output (P×N).
    fn cross_kernel(&self, model: &OutputModel, points: &Array2<f64>) -> Mat<f64> {
        let n = self.training_points();
        let m = self.input_dim();
        Mat::from_fn(points.nrows(), n, |i, t| {
            let mut q = 0.0;
            for j in 0..m {
                let d = (points[[i, j]] - self.inputs[[t, j]]) / model.params.lengthscales[j];
                q += d * d;
            }
            model.params.signal_variance * (-0.5 * q).exp()
        })
    }

    fn check_points(&self, points: &Array2<f64>) -> Result<()> {
        if points.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", self.input_dim()),
                got: format!("{}", points.ncols()),
            });
        }
        for row in points.rows() {
            for (axis, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain { axis, value: v });
                }
            }
        }
        Ok(())
    }

    /// Serializes the surrogate as a JSON document with every float printed
    /// to 17 significant digits, so that a written model reloads bit-exactly.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{{\n  \"training_points\": {},\n  \"input_dim\": {},\n  \"inputs\": [",
            self.training_points(),
            self.input_dim()
        );
        for i in 0..self.training_points() {
            let _ = write!(s, "{}[", if i == 0 { "" } else { ", " });
            for j in 0..self.input_dim() {
                let sep = if j == 0 { "" } else { ", " };
                let _ = write!(s, "{sep}{}", fmt_g17(self.inputs[[i, j]]));
            }
            let _ = write!(s, "]");
        }
        let _ = write!(s, "],\n  \"outputs\": [");
        for (l, model) in self.models.iter().enumerate() {
            let _ = write!(s, "{}\n    {{\n      \"lengthscales\": [", if l == 0 { "" } else { "," });
            for (j, lam) in model.params.lengthscales.iter().enumerate() {
                let sep = if j == 0 { "" } else { ", " };
                let _ = write!(s, "{sep}{}", fmt_g17(*lam));
            }
            let _ = write!(
                s,
                "],\n      \"signal_variance\": {},\n      \"noise_variance\": {},\n      \"jitter\": {},\n      \"log_marginal_likelihood\": {},\n      \"condition_estimate\": {},\n      \"dual_weights\": [",
                fmt_g17(model.params.signal_variance),
                fmt_g17(model.params.noise_variance),
                fmt_g17(model.jitter),
                fmt_g17(model.log_marginal_likelihood),
                fmt_g17(model.condition_estimate),
            );
            for (i, a) in model.dual_weights.iter().enumerate() {
                let sep = if i == 0 { "" } else { ", " };
                let _ = write!(s, "{sep}{}", fmt_g17(*a));
            }
            let _ = write!(s, "]\n    }}");
        }
        s.push_str("\n  ]\n}\n");
        s
    }

    /// Parses a document produced by [`Surrogate::to_json`], rebuilding the
    /// Cholesky factors from the stored hyperparameters and jitter.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("malformed surrogate JSON: {e}")))?;
        let n = json_usize(&doc, "training_points")?;
        let m = json_usize(&doc, "input_dim")?;
        let rows = doc
            .get("inputs")
            .and_then(|v| v.as_array())
            .ok_or_else(|| missing("inputs"))?;
        if rows.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} input rows"),
                got: format!("{}", rows.len()),
            });
        }
        let mut inputs = Array2::zeros((n, m));
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_array().ok_or_else(|| missing("inputs row"))?;
            if row.len() != m {
                return Err(Error::ShapeMismatch {
                    expected: format!("{m} input columns"),
                    got: format!("{}", row.len()),
                });
            }
            for (j, v) in row.iter().enumerate() {
                inputs[[i, j]] = v.as_f64().ok_or_else(|| missing("inputs entry"))?;
            }
        }
        let outs = doc
            .get("outputs")
            .and_then(|v| v.as_array())
            .ok_or_else(|| missing("outputs"))?;
        let tables = DistanceTables::new(&inputs);
        let mut models = Vec::with_capacity(outs.len());
        let mut factors = Vec::with_capacity(outs.len());
        for (l, entry) in outs.iter().enumerate() {
            let lengthscales = json_f64_list(entry, "lengthscales")?;
            let params = RbfKernelParams::new(
                lengthscales,
                json_f64(entry, "signal_variance")?,
                json_f64(entry, "noise_variance")?,
            )?;
            let jitter = json_f64(entry, "jitter")?;
            let dual_weights = json_f64_list(entry, "dual_weights")?;
            if dual_weights.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n} dual weights"),
                    got: format!("{}", dual_weights.len()),
                });
            }
            let mut gram = tables.gram(&params);
            for i in 0..n {
                gram[(i, i)] += jitter;
            }
            let llt = gram
                .llt(Side::Lower)
                .map_err(|_| Error::FactorizationFailure { output: l, jitter })?;
            models.push(OutputModel {
                params,
                dual_weights,
                jitter,
                log_marginal_likelihood: json_f64(entry, "log_marginal_likelihood")?,
                condition_estimate: json_f64(entry, "condition_estimate")?,
                mll_trace: Vec::new(),
            });
            factors.push(llt);
        }
        Ok(Self { inputs, models, factors })
    }
}

fn missing(field: &str) -> Error {
    Error::InvalidArgument(format!("surrogate JSON is missing field `{field}`"))
}

fn json_usize(v: &serde_json::Value, field: &str) -> Result<usize> {
    v.get(field)
        .and_then(|x| x.as_u64())
        .map(|x| x as usize)
        .ok_or_else(|| missing(field))
}

fn json_f64(v: &serde_json::Value, field: &str) -> Result<f64> {
    v.get(field).and_then(|x| x.as_f64()).ok_or_else(|| missing(field))
}

fn json_f64_list(v: &serde_json::Value, field: &str) -> Result<Vec<f64>> {
    let arr = v.get(field).and_then(|x| x.as_array()).ok_or_else(|| missing(field))?;
    arr.iter()
        .map(|x| x.as_f64().ok_or_else(|| missing(field)))
        .collect()
}

/// Per-axis squared-distance tables over a fixed set of rows, shared by all
/// Gram assemblies and likelihood gradients on those rows.
struct DistanceTables {
    per_axis: Vec<Matrix>,
    n: usize,
}

impl DistanceTables {
    fn new(points: &Array2<f64>) -> Self {
        let (n, m) = (points.nrows(), points.ncols());
        let per_axis = (0..m)
            .map(|j| {
                Matrix::from_fn(n, n, |i, ip| {
                    let d = points[[i, j]] - points[[ip, j]];
                    d * d
                })
            })
            .collect();
        Self { per_axis, n }
    }

    /// Signal part of the Gram matrix, `σ²_f R(λ)` (no noise, no jitter).
    fn signal_gram(&self, params: &RbfKernelParams) -> Mat<f64> {
        let inv2: Vec<f64> = params
            .lengthscales
            .iter()
            .map(|l| 0.5 / (l * l))
            .collect();
        Mat::from_fn(self.n, self.n, |i, ip| {
            let mut q = 0.0;
            for (j, table) in self.per_axis.iter().enumerate() {
                q += table[(i, ip)] * inv2[j];
            }
            params.signal_variance * (-q).exp()
        })
    }

    /// Full regularized Gram matrix `σ²_f R + σ²_n I`.
    fn gram(&self, params: &RbfKernelParams) -> Mat<f64> {
        let mut k = self.signal_gram(params);
        for i in 0..self.n {
            k[(i, i)] += params.noise_variance;
        }
        k
    }
}

/// Tries to factorize `gram`, escalating a diagonal jitter from
/// `JITTER_BASE·trace/N` by decades up to `JITTER_CAP·trace/N`. Returns the
/// factorization and the jitter that succeeded (`0.0` when none was needed).
fn factor_with_jitter(gram: Mat<f64>, n: usize) -> Option<(Llt<f64>, f64)> {
    let trace: f64 = (0..n).map(|i| gram[(i, i)]).sum();
    let scale = trace / n as f64;
    if let Ok(llt) = gram.llt(Side::Lower) {
        return Some((llt, 0.0));
    }
    let mut jitter = JITTER_BASE * scale;
    let cap = JITTER_CAP * scale;
    while jitter <= cap * (1.0 + 1e-12) {
        let mut regularized = gram.clone();
        for i in 0..n {
            regularized[(i, i)] += jitter;
        }
        if let Ok(llt) = regularized.llt(Side::Lower) {
            return Some((llt, jitter));
        }
        jitter *= 10.0;
    }
    None
}

/// Marginal log-likelihood and its gradient in log-parameter space
/// `θ = (log λ_1, …, log λ_M, log σ²_f, log σ²_n)`.
///
/// Returns `None` when the Gram matrix cannot be factorized at this point of
/// the search (treated as a rejected step by the line search).
fn mll_with_grad(theta: &[f64], y: &[f64], tables: &DistanceTables) -> Option<(f64, Vec<f64>)> {
    let m = theta.len() - 2;
    let n = tables.n;
    let params = RbfKernelParams {
        lengthscales: theta[..m].iter().map(|t| t.exp()).collect(),
        signal_variance: theta[m].exp(),
        noise_variance: theta[m + 1].exp(),
    };
    let signal = tables.signal_gram(&params);
    let mut k = signal.clone();
    for i in 0..n {
        k[(i, i)] += params.noise_variance;
    }
    let (llt, jitter) = factor_with_jitter(k, n)?;
    let rhs = Mat::from_fn(n, 1, |i, _| y[i]);
    let alpha = llt.solve(&rhs);
    let mut log_det = 0.0;
    let lf = llt.L();
    for i in 0..n {
        log_det += lf[(i, i)].ln();
    }
    let fit_term: f64 = (0..n).map(|i| y[i] * alpha[(i, 0)]).sum();
    let mll = -0.5 * fit_term - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !mll.is_finite() {
        return None;
    }

    // B = ααᵀ − K⁻¹; gradient of the MLL w.r.t. any kernel parameter θ is
    // ½ tr(B ∂K/∂θ). The jitter is a fixed regularizer, not a parameter.
    let _ = jitter;
    let k_inv = llt.inverse();
    let mut grad = vec![0.0; m + 2];
    // C[i,i'] = B[i,i'] · signal[i,i'] reused by all lengthscale gradients
    // and (summed) by the signal-variance gradient.
    let mut signal_sum = 0.0;
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        for ip in 0..n {
            let b = alpha[(i, 0)] * alpha[(ip, 0)] - k_inv[(i, ip)];
            let prod = b * signal[(i, ip)];
            c[(i, ip)] = prod;
            signal_sum += prod;
        }
    }
    for (j, table) in tables.per_axis.iter().enumerate() {
        let inv2 = 1.0 / (params.lengthscales[j] * params.lengthscales[j]);
        let mut acc = 0.0;
        for i in 0..n {
            for ip in 0..n {
                acc += c[(i, ip)] * table[(i, ip)];
            }
        }
        grad[j] = 0.5 * acc * inv2;
    }
    grad[m] = 0.5 * signal_sum;
    let trace_b: f64 = (0..n).map(|i| alpha[(i, 0)] * alpha[(i, 0)] - k_inv[(i, i)]).sum();
    grad[m + 1] = 0.5 * params.noise_variance * trace_b;
    Some((mll, grad))
}

/// Maximizes the MLL for one output by box-projected L-BFGS from several
/// deterministic starts; returns the winning hyperparameters, their MLL and
/// the accepted-step MLL trace.
fn fit_output(
    tables: &DistanceTables,
    y: &[f64],
    options: &FitOptions,
    output: usize,
) -> Result<(RbfKernelParams, f64, Vec<f64>)> {
    let m = tables.per_axis.len();
    let mut lo = vec![LENGTHSCALE_RANGE.0.ln(); m];
    let mut hi = vec![LENGTHSCALE_RANGE.1.ln(); m];
    lo.extend([SIGNAL_VARIANCE_RANGE.0.ln(), NOISE_VARIANCE_RANGE.0.ln()]);
    hi.extend([SIGNAL_VARIANCE_RANGE.1.ln(), NOISE_VARIANCE_RANGE.1.ln()]);

    let mut best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    for restart in 0..options.restarts.max(1) {
        let start = if restart == 0 {
            // Mid-range heuristic for standardized targets.
            let mut s = vec![0.5_f64.ln(); m];
            s.extend([0.0, 0.01_f64.ln()]);
            s
        } else if restart == 1 && options.restarts > 1 {
            // Noise-dominant heuristic: guarantees the "all noise"
            // explanation is among the candidates. Gradient paths from
            // signal-heavy starts can plateau at noise-interpolating
            // lengthscales instead, which only the tie-break below can
            // then reject.
            let mut s = vec![0.5_f64.ln(); m];
            s.extend([0.01_f64.ln(), 0.0]);
            s
        } else {
            let stream =
                mix64(options.seed ^ mix64(((output as u64) << 32) | u64::from(restart)));
            let mut rng = ChaCha12Rng::seed_from_u64(stream);
            let mut s: Vec<f64> =
                (0..m).map(|_| log_uniform(&mut rng, 0.05, 2.0)).collect();
            s.push(log_uniform(&mut rng, 0.3, 3.0));
            s.push(log_uniform(&mut rng, 1e-6, 1e-1));
            s
        };
        let outcome = maximize_boxed(
            &start,
            &lo,
            &hi,
            options.max_iterations,
            |theta| mll_with_grad(theta, y, tables),
        );
        if let Some((theta, value, trace)) = outcome {
            let better = match &best {
                None => true,
                Some((best_theta, best_value, _)) => {
                    // At lengthscales far below the point spacing the kernel
                    // is numerically diagonal and the likelihood cannot tell
                    // signal from noise (σ²_f and σ²_n trade off exactly).
                    // Break such ties toward the smaller signal variance —
                    // the explanation that attributes less to structure.
                    let tol = 1e-6 * best_value.abs().max(1.0);
                    if value > *best_value + tol {
                        true
                    } else {
                        value > *best_value - tol && theta[m] < best_theta[m]
                    }
                }
            };
            if better {
                best = Some((theta, value, trace));
            }
        }
    }
    let (theta, value, trace) = best.ok_or(Error::FactorizationFailure {
        output,
        jitter: JITTER_CAP,
    })?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLikelihood { output });
    }
    let params = RbfKernelParams {
        lengthscales: theta[..m].iter().map(|t| t.exp()).collect(),
        signal_variance: theta[m].exp(),
        noise_variance: theta[m + 1].exp(),
    };
    Ok((params, value, trace))
}

/// Draws from the log-uniform distribution on `[lo, hi]`.
fn log_uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

/// Box-constrained L-BFGS ascent (memory 8, Armijo backtracking on the
/// projected step). `eval` returns the objective and gradient, or `None`
/// where the objective is undefined; undefined trial points are treated as
/// rejected steps. Returns the best point, its value, and the accepted-value
/// trace, or `None` if even the start point is undefined.
fn maximize_boxed(
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    max_iterations: u32,
    mut eval: impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    const MEMORY: usize = 8;
    const ARMIJO: f64 = 1e-4;
    const MAX_BACKTRACKS: u32 = 30;
    let dim = start.len();
    let clamp = |x: &mut Vec<f64>| {
        for i in 0..dim {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    };

    let mut x: Vec<f64> = start.to_vec();
    clamp(&mut x);
    let (mut fx, mut gx) = eval(&x)?;
    let mut trace = vec![fx];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();

    for _ in 0..max_iterations {
        // Projected gradient for the ascent problem: zero out components
        // that push against an active bound.
        let mut pg = gx.clone();
        for i in 0..dim {
            let at_lo = x[i] <= lo[i] + 1e-12 && gx[i] < 0.0;
            let at_hi = x[i] >= hi[i] - 1e-12 && gx[i] > 0.0;
            if at_lo || at_hi {
                pg[i] = 0.0;
            }
        }
        let pg_norm = pg.iter().fold(0.0_f64, |a, g| a.max(g.abs()));
        if pg_norm < 1e-6 * fx.abs().max(1.0) {
            break;
        }

        // Two-loop recursion on the negated gradient (we maximize).
        let mut d: Vec<f64> = gx.clone();
        let pairs = s_hist.len();
        let mut alphas = vec![0.0; pairs];
        for k in (0..pairs).rev() {
            let a = rho[k] * dot(&s_hist[k], &d);
            alphas[k] = a;
            for i in 0..dim {
                d[i] -= a * y_hist[k][i];
            }
        }
        if pairs > 0 {
            let k = pairs - 1;
            let scale = dot(&s_hist[k], &y_hist[k]) / dot(&y_hist[k], &y_hist[k]);
            for v in d.iter_mut() {
                *v *= scale;
            }
        }
        for k in 0..pairs {
            let b = rho[k] * dot(&y_hist[k], &d);
            for i in 0..dim {
                d[i] += s_hist[k][i] * (alphas[k] - b);
            }
        }
        // Fall back to steepest ascent when the quasi-Newton direction is
        // not an ascent direction.
        if dot(&d, &gx) <= 0.0 {
            d = gx.clone();
            s_hist.clear();
            y_hist.clear();
            rho.clear();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = (0..dim).map(|i| x[i] + step * d[i]).collect();
            clamp(&mut trial);
            let ascent: f64 = (0..dim).map(|i| gx[i] * (trial[i] - x[i])).sum();
            if ascent <= 0.0 {
                step *= 0.5;
                continue;
            }
            if let Some((ft, gt)) = eval(&trial) {
                if ft >= fx + ARMIJO * ascent {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };
        let s: Vec<f64> = (0..dim).map(|i| x_new[i] - x[i]).collect();
        // Curvature pair for maximization: y = g_old − g_new keeps sᵀy > 0
        // on concave stretches.
        let yv: Vec<f64> = (0..dim).map(|i| gx[i] - g_new[i]).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * norm(&s) * norm(&yv) {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
            rho.push(1.0 / sy);
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
        trace.push(fx);
    }
    Some((x, fx, trace))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
