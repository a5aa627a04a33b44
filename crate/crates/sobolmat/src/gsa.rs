//! Assembly of Sobol' matrices, total matrices, and their standard errors.
//!
//! For an axis subset `m` the closed Sobol' matrix normalizes the marginal
//! covariance by the total standard deviations,
//!
//! ```text
//! S_m = V_m / (D_M ⊗ D_M),          D_M[l] = sqrt(V_M[l,l]),
//! ```
//!
//! so `S_M` is the output correlation matrix (unit diagonal) and `diag(S_m)`
//! reproduces the scalar closed Sobol' indices. The total matrix is the
//! complement difference `Sᵀ_{M−m} = S_M − S_m`: it measures everything the
//! axes *outside* `m` touch. The direct elementwise ratio `V_m/V_M` is
//! deliberately not offered — it is undefined wherever `S_M` vanishes
//! off-diagonal, while this form is always well defined.
//!
//! # Standard errors
//!
//! Writing `V̂` for the random covariance matrices induced by the surrogate
//! posterior, a first-order Taylor (delta-method) expansion of
//! `S_m = V̂_m/(D̂ ⊗ D̂)` around the posterior mean gives the error variance
//!
//! ```text
//! Q_m[l,l'] = W_mm[l,l',l,l']
//!           − V_m[l,l'] Σ_{l‡ ∈ (l,l')} W_mM[l,l',l‡,l‡] / D²_{l‡}
//!           + (V_m[l,l']²/4) Σ_{l‡,l‡‡ ∈ (l,l')} W_MM[l‡,l‡,l‡‡,l‡‡] / (D²_{l‡} D²_{l‡‡}),
//! T_m[l,l'] = sqrt(Q_m[l,l']) / (D_l D_{l'}),
//! ```
//!
//! where the sums run over the two-element *tuple* `(l, l')` (both copies
//! count when `l = l'`) — the three terms are the variance of the numerator,
//! its covariance with the denominators, and the denominators' own variance.
//! Expanding the `W` pairing deltas reduces everything to the `G`-tensor
//! slices `C1_m[a,b] = G_mm[a,b,a]`, `C2_m[a,b] = G_mM[a,b,b]` and
//! `w₃[b] = G_MM[b,b,b]` provided by the moments engine. On the diagonal at
//! `m = M` the three terms cancel exactly (`4w₃ − 8w₃ + 4w₃`): the total
//! correlation of an output with itself is 1 with zero uncertainty.
//!
//! # Numerical resolution of `Q`
//!
//! Every `C1`/`C2` entry is a small difference of prior- and data-side terms
//! whose individual magnitudes scale like `σ⁴` times Gram-weighted sums —
//! for sharp fits (large signal variance, ill-conditioned Gram matrix) they
//! can exceed the true `Q` by many orders of magnitude. Round-off in `Q` is
//! therefore bounded not by `Q`'s own scale but by
//! `ε · κ · (summed term magnitudes)`, with `κ` the Gram condition number.
//! The engine tracks those magnitudes per entry, and any `Q` within that
//! bound of zero — of either sign — is reported as `T = 0` and recorded in
//! [`ReportDiagnostics::clamped_entries`]: the error bar is below what the
//! computation can resolve. Negative values *beyond* the bound raise
//! [`Error::NegativeQ`] — a genuine inconsistency rather than round-off.
//! The error of the total matrix adds: `Tᵀ_{M−m} = T_M + T_m` is
//! conservative, achieving equality on the diagonal.
//!
//! # Filtering
//!
//! Estimated matrices live on known scales: diagonal closed indices in
//! `[0, 1]` and error estimates far below 1. Entries outside the window
//! `[−0.001, 1.001]` are numerically impossible, so [`filter_reports`]
//! removes the offending outputs from *every* report of the fold (an
//! unstable output poisons all pairs it participates in) and logs what was
//! removed and why.

use crate::axes::AxisSet;
use crate::error::{Error, Result};
use crate::moments::{ErrorSlices, MomentEngine};
use crate::qmc::SobolSequence;
use crate::tensor::Matrix;

/// Acceptance window for plausible closed-index and error entries.
pub const FILTER_WINDOW: (f64, f64) = (-0.001, 1.001);

/// Baseline relative round-off clamp: `Q` entries within
/// `RELATIVE_Q_CLAMP · scale` of zero are treated as exact zeros even for
/// perfectly conditioned models (accumulated rounding across the table
/// contractions).
const RELATIVE_Q_CLAMP: f64 = 1e-8;

/// Safety factor on the conditioning-driven part of the clamp tolerance,
/// `CONDITION_SAFETY · ε · κ`: solves and quadratic forms through a Gram
/// matrix with condition estimate `κ` lose about `ε · κ` relative accuracy,
/// and the factor absorbs the constants the bound hides.
const CONDITION_SAFETY: f64 = 32.0;

/// Numerical health data carried alongside the matrices of one report.
#[derive(Debug, Clone)]
pub struct ReportDiagnostics {
    /// `sqrt(Var V̂_m[l,l']) / |V_m[l,l']|`: how well the random covariance
    /// is approximated by its mean. Large values mean the Taylor series
    /// behind `T_m` is extrapolating.
    pub dispersion_ratio: Matrix,
    /// Entries of `Q_m` whose magnitude was below the numerical resolution
    /// of the computation and were clamped to zero (`T_m` reports 0 there).
    pub clamped_entries: Vec<(usize, usize)>,
    /// Outputs removed by [`filter_reports`] (empty until filtering runs).
    pub removed_outputs: Vec<usize>,
}

/// Sobol' matrices and error estimates for one axis subset.
#[derive(Debug, Clone)]
pub struct SobolReport {
    /// The retained axes `m`.
    pub subset: AxisSet,
    /// Marginal covariance `V_m`.
    pub v: Matrix,
    /// Closed Sobol' matrix `S_m`.
    pub s: Matrix,
    /// Total Sobol' matrix `Sᵀ_{M−m} = S_M − S_m` of the complement.
    pub s_total: Matrix,
    /// Standard error `T_m` of the closed matrix.
    pub t: Matrix,
    /// Conservative standard error `Tᵀ_{M−m} = T_M + T_m` of the total matrix.
    pub t_total: Matrix,
    /// Total standard deviations `D_M`.
    pub d: Vec<f64>,
    /// Numerical health indicators.
    pub diagnostics: ReportDiagnostics,
}

/// One filter removal with its cause.
#[derive(Debug, Clone)]
pub struct FilterEvent {
    /// Subset of the report the violation appeared in.
    pub subset: AxisSet,
    /// `"S"` (diagonal closed index) or `"T"` (error estimate).
    pub matrix: &'static str,
    /// Element that violated the window.
    pub l: usize,
    pub lp: usize,
    /// The offending value.
    pub value: f64,
}

/// Normalizes a marginal covariance into a closed Sobol' matrix
/// `S_m = V_m / (D ⊗ D)`.
pub fn closed_sobol_matrix(v_m: &Matrix, d: &[f64]) -> Result<Matrix> {
    let l_outs = v_m.rows();
    if d.len() != l_outs || v_m.cols() != l_outs {
        return Err(Error::ShapeMismatch {
            expected: format!("{l_outs}×{l_outs} matrix with {l_outs} scales"),
            got: format!("{}×{} with {}", v_m.rows(), v_m.cols(), d.len()),
        });
    }
    for (l, &dl) in d.iter().enumerate() {
        if !(dl.is_finite() && dl > 0.0) {
            return Err(Error::DivisionByZero { l, lp: l });
        }
    }
    let mut s = Matrix::zeros(l_outs, l_outs);
    for l in 0..l_outs {
        for lp in 0..l_outs {
            s[(l, lp)] = v_m[(l, lp)] / (d[l] * d[lp]);
        }
    }
    Ok(s)
}

/// Total Sobol' matrix of the complement subset: `Sᵀ_{M−m} = S_M − S_m`.
pub fn total_sobol_matrix(s_full: &Matrix, s_m: &Matrix) -> Result<Matrix> {
    s_full.sub(s_m)
}

/// Raw error variances `Q_m` with two per-entry magnitude scales for the
/// round-off clamp: `pre[(l,l')]` is the pre-cancellation contraction
/// magnitude (the engine-reported `C1`/`C2` scales combined with the same
/// coefficients the `Q` terms use — everything that was added and
/// subtracted inside the entry), and `post[(l,l')] = |t1| + |t2| + |t3|`
/// is the magnitude of the assembled terms themselves.
fn q_matrix(
    slices: &ErrorSlices,
    w3: &[f64],
    w3_scale: &[f64],
    v_m: &Matrix,
    d: &[f64],
) -> (Matrix, Matrix, Matrix) {
    let (c1, c2) = (&slices.c1, &slices.c2);
    let l_outs = v_m.rows();
    let mut q = Matrix::zeros(l_outs, l_outs);
    let mut pre = Matrix::zeros(l_outs, l_outs);
    let mut post = Matrix::zeros(l_outs, l_outs);
    for l in 0..l_outs {
        for lp in 0..l_outs {
            let v = v_m[(l, lp)];
            let d2l = d[l] * d[l];
            let d2lp = d[lp] * d[lp];
            let (t1, t2, t3, scale) = if l == lp {
                (
                    4.0 * c1[(l, l)],
                    v * 8.0 * c2[(l, l)] / d2l,
                    4.0 * v * v * w3[l] / (d2l * d2l),
                    4.0 * slices.c1_scale[(l, l)]
                        + v.abs() * 8.0 * slices.c2_scale[(l, l)] / d2l
                        + 4.0 * v * v * w3_scale[l] / (d2l * d2l),
                )
            } else {
                (
                    c1[(lp, l)] + c1[(l, lp)],
                    v * 2.0 * (c2[(lp, l)] / d2l + c2[(l, lp)] / d2lp),
                    v * v * (w3[l] / (d2l * d2l) + w3[lp] / (d2lp * d2lp)),
                    slices.c1_scale[(lp, l)]
                        + slices.c1_scale[(l, lp)]
                        + v.abs()
                            * 2.0
                            * (slices.c2_scale[(lp, l)] / d2l
                                + slices.c2_scale[(l, lp)] / d2lp)
                        + v * v
                            * (w3_scale[l] / (d2l * d2l) + w3_scale[lp] / (d2lp * d2lp)),
                )
            };
            q[(l, lp)] = t1 - t2 + t3;
            pre[(l, lp)] = scale;
            post[(l, lp)] = t1.abs() + t2.abs() + t3.abs();
        }
    }
    (q, pre, post)
}

/// Clamps `Q` entries below the numerical resolution to zero and converts
/// to the error matrix `T = sqrt(Q)/(D ⊗ D)`; negatives beyond the
/// resolution raise [`Error::NegativeQ`].
///
/// `conditions` holds per-output upper bounds on the Gram condition number
/// (NaN entries disable the conditioning term and leave the baseline).
fn error_matrix_from_q(
    q: &Matrix,
    pre: &Matrix,
    post: &Matrix,
    d: &[f64],
    conditions: &[f64],
) -> Result<(Matrix, Vec<(usize, usize)>)> {
    let l_outs = q.rows();
    let qmax = q.max_abs();
    let mut t = Matrix::zeros(l_outs, l_outs);
    let mut clamped = Vec::new();
    for l in 0..l_outs {
        for lp in 0..l_outs {
            let mut value = q[(l, lp)];
            // Two error channels add: conditioning loss, which acts on the
            // pre-cancellation contraction magnitude, and accumulated
            // rounding at the assembled scale — the largest of the matrix's
            // own largest entry, this entry's term magnitudes, and the
            // intrinsic squared-covariance scale (D_l D_l')². The last floor
            // matters when the whole matrix is round-off noise around an
            // exact zero (e.g. the empty subset). f64::max skips NaN, so a
            // NaN condition bound drops the first channel.
            let kappa = conditions[l].max(conditions[lp]);
            let conditioning = (CONDITION_SAFETY * f64::EPSILON * kappa).max(0.0);
            let d2 = d[l] * d[l] * d[lp] * d[lp];
            let tolerance = conditioning * pre[(l, lp)]
                + RELATIVE_Q_CLAMP * qmax.max(post[(l, lp)]).max(d2);
            if value.abs() <= tolerance {
                if value != 0.0 {
                    clamped.push((l, lp));
                }
                value = 0.0;
            } else if value < 0.0 {
                return Err(Error::NegativeQ { l, lp, value });
            }
            t[(l, lp)] = value.sqrt() / (d[l] * d[lp]);
        }
    }
    Ok((t, clamped))
}

/// Computes full Sobol' reports for a schedule of subsets.
///
/// The full axis set is always computed internally (it provides `S_M`, `D`
/// and `T_M`); table construction is shared across the whole schedule, so
/// one call with many subsets is much cheaper than many calls.
pub fn compute_reports(
    engine: &MomentEngine<'_>,
    subsets: &[AxisSet],
) -> Result<Vec<SobolReport>> {
    let m_dims = engine.surrogate().input_dim();
    let full = AxisSet::full(m_dims);
    let mut schedule: Vec<AxisSet> = subsets.to_vec();
    let full_idx = match schedule.iter().position(|m| *m == full) {
        Some(i) => i,
        None => {
            schedule.push(full.clone());
            schedule.len() - 1
        }
    };

    let variances = engine.variance_batch(&schedule)?;
    let slices = engine.error_slices_batch(&schedule)?;
    let (v_full, d) = engine.total_variance()?;
    let s_full = closed_sobol_matrix(v_full, d)?;
    let l_outs = engine.surrogate().output_count();
    let w3: Vec<f64> = (0..l_outs).map(|b| slices[full_idx].c2[(b, b)]).collect();
    let w3_scale: Vec<f64> = (0..l_outs)
        .map(|b| slices[full_idx].c2_scale[(b, b)])
        .collect();
    // Spectral bound on each output's Gram condition number: the unit-
    // diagonal correlation part has eigenvalues in [0, n], so
    // κ ≤ (n σ²_f + σ²_n + jitter)/(σ²_n + jitter). Unlike the Cholesky
    // diagonal ratio stored on the model this cannot underestimate, which is
    // what the clamp tolerance needs — near-interpolating fits reach κ ~ 1e11
    // and their error slices carry matching relative noise.
    let n_points = engine.surrogate().training_points() as f64;
    let conditions: Vec<f64> = engine
        .surrogate()
        .models()
        .iter()
        .map(|m| {
            let floor = m.params.noise_variance + m.jitter;
            (n_points * m.params.signal_variance + floor) / floor
        })
        .collect();
    let (q_full, pre_full, post_full) = q_matrix(&slices[full_idx], &w3, &w3_scale, v_full, d);
    let (t_full, _) = error_matrix_from_q(&q_full, &pre_full, &post_full, d, &conditions)?;

    let mut reports = Vec::with_capacity(subsets.len());
    for (si, m) in subsets.iter().enumerate() {
        let v_m = &variances[si];
        let s_m = closed_sobol_matrix(v_m, d)?;
        let s_total = total_sobol_matrix(&s_full, &s_m)?;
        let (q, pre, post) = q_matrix(&slices[si], &w3, &w3_scale, v_m, d);
        let (t_m, clamped) = error_matrix_from_q(&q, &pre, &post, d, &conditions)?;
        let t_total = t_full.add(&t_m)?;
        // Dispersion of the covariance estimate itself: sqrt(Var V̂)/|V|,
        // with Var V̂_m[l,l'] being the first Q term.
        let mut dispersion = Matrix::zeros(l_outs, l_outs);
        for l in 0..l_outs {
            for lp in 0..l_outs {
                let var_v = if l == lp {
                    4.0 * slices[si].c1[(l, l)]
                } else {
                    slices[si].c1[(lp, l)] + slices[si].c1[(l, lp)]
                };
                dispersion[(l, lp)] =
                    var_v.max(0.0).sqrt() / v_m[(l, lp)].abs().max(f64::MIN_POSITIVE);
            }
        }
        reports.push(SobolReport {
            subset: m.clone(),
            v: v_m.clone(),
            s: s_m,
            s_total,
            t: t_m,
            t_total,
            d: d.to_vec(),
            diagnostics: ReportDiagnostics {
                dispersion_ratio: dispersion,
                clamped_entries: clamped,
                removed_outputs: Vec::new(),
            },
        });
    }
    Ok(reports)
}

/// Closed Sobol' matrix of a single axis.
pub fn first_order_matrix(engine: &MomentEngine<'_>, axis: usize) -> Result<Matrix> {
    let m_dims = engine.surrogate().input_dim();
    let m = AxisSet::single(axis, m_dims)?;
    let v = engine.marginal_variance(&m)?;
    let (_, d) = engine.total_variance()?;
    closed_sobol_matrix(&v, d)
}

/// Applies the plausibility window to a fold's reports.
///
/// A diagonal closed index or any error entry outside `window` marks the
/// participating outputs as numerically impossible; those outputs' rows and
/// columns are replaced by NaN in every matrix of every report of the fold,
/// and the removals are logged. Surviving entries are untouched.
pub fn filter_reports(
    reports: &[SobolReport],
    window: (f64, f64),
) -> (Vec<SobolReport>, Vec<FilterEvent>) {
    let (lo, hi) = window;
    let mut events = Vec::new();
    let mut removed: Vec<usize> = Vec::new();
    for report in reports {
        let l_outs = report.s.rows();
        for l in 0..l_outs {
            let s_ll = report.s[(l, l)];
            if !(lo..=hi).contains(&s_ll) {
                events.push(FilterEvent {
                    subset: report.subset.clone(),
                    matrix: "S",
                    l,
                    lp: l,
                    value: s_ll,
                });
                if !removed.contains(&l) {
                    removed.push(l);
                }
            }
            for lp in 0..l_outs {
                let t_llp = report.t[(l, lp)];
                if !(lo..=hi).contains(&t_llp) {
                    events.push(FilterEvent {
                        subset: report.subset.clone(),
                        matrix: "T",
                        l,
                        lp,
                        value: t_llp,
                    });
                    for out in [l, lp] {
                        if !removed.contains(&out) {
                            removed.push(out);
                        }
                    }
                }
            }
        }
    }
    removed.sort_unstable();

    let mask = |matrix: &Matrix| -> Matrix {
        let mut masked = matrix.clone();
        for &out in &removed {
            for k in 0..matrix.cols() {
                masked[(out, k)] = f64::NAN;
            }
            for k in 0..matrix.rows() {
                masked[(k, out)] = f64::NAN;
            }
        }
        masked
    };
    let filtered = reports
        .iter()
        .map(|report| {
            let mut out = report.clone();
            out.v = mask(&report.v);
            out.s = mask(&report.s);
            out.s_total = mask(&report.s_total);
            out.t = mask(&report.t);
            out.t_total = mask(&report.t_total);
            out.diagnostics.removed_outputs = removed.clone();
            out
        })
        .collect();
    (filtered, events)
}

/// Coefficient-of-determination diagnostic: the squared correlation between
/// `μ_m(u_m)` and `μ_M(u)` under a quasi-Monte-Carlo stream, which for an
/// exact integrator equals `diag(S_m)`.
pub fn r_squared(
    engine: &MomentEngine<'_>,
    m: &AxisSet,
    n_points: u32,
    seed: u32,
) -> Result<Vec<f64>> {
    let m_dims = engine.surrogate().input_dim();
    let l_outs = engine.surrogate().output_count();
    if n_points < 2 {
        return Err(Error::InvalidArgument(
            "coefficient of determination needs at least two sample points".into(),
        ));
    }
    let sequence = SobolSequence::new(m_dims, seed);
    let mut point = vec![0.0; m_dims];
    let mut full_points = ndarray::Array2::zeros((n_points as usize, m_dims));
    let mut sub_points = ndarray::Array2::zeros((n_points as usize, m.len()));
    for i in 0..n_points as usize {
        sequence.fill_point(i as u32, &mut point);
        for j in 0..m_dims {
            full_points[[i, j]] = point[j];
        }
        for (c, &j) in m.axes().iter().enumerate() {
            sub_points[[i, c]] = point[j];
        }
    }
    let mu_full = engine.surrogate().predict_mean(&full_points)?;
    let mu_sub = engine.marginal_mean(m, &sub_points)?;
    let n = n_points as f64;
    let mut out = Vec::with_capacity(l_outs);
    for l in 0..l_outs {
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n_points as usize {
            let x = mu_sub[[i, l]];
            let y = mu_full[[i, l]];
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
        let var_x = sxx / n - (sx / n) * (sx / n);
        let var_y = syy / n - (sy / n) * (sy / n);
        let cov = sxy / n - (sx / n) * (sy / n);
        if var_y <= 0.0 {
            return Err(Error::ZeroVariance { output: l });
        }
        // A constant marginal mean carries no variance: R² is 0 by
        // convention rather than 0/0.
        out.push(if var_x <= 0.0 { 0.0 } else { cov * cov / (var_x * var_y) });
    }
    Ok(out)
}

/// Determinant and max-abs summary of the principal submatrix selected by
/// `outputs` — the seminorm pair used to condense a matrix into scalars.
pub fn submatrix_summary(matrix: &Matrix, outputs: &[usize]) -> Result<(f64, f64)> {
    let l_outs = matrix.rows();
    for &o in outputs {
        if o >= l_outs {
            return Err(Error::InvalidArgument(format!(
                "output {o} out of range for {l_outs} outputs"
            )));
        }
    }
    let k = outputs.len();
    let mut sub = vec![0.0; k * k];
    let mut max_abs = 0.0_f64;
    for (r, &i) in outputs.iter().enumerate() {
        for (c, &j) in outputs.iter().enumerate() {
            let v = matrix[(i, j)];
            sub[r * k + c] = v;
            max_abs = max_abs.max(v.abs());
        }
    }
    // Gaussian elimination with partial pivoting (submatrices are tiny).
    let mut det = 1.0;
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&a, &b| {
                sub[a * k + col]
                    .abs()
                    .partial_cmp(&sub[b * k + col].abs())
                    .unwrap()
            })
            .unwrap();
        if sub[pivot * k + col] == 0.0 {
            return Ok((0.0, max_abs));
        }
        if pivot != col {
            for j in 0..k {
                sub.swap(col * k + j, pivot * k + j);
            }
            det = -det;
        }
        det *= sub[col * k + col];
        for row in col + 1..k {
            let factor = sub[row * k + col] / sub[col * k + col];
            for j in col..k {
                sub[row * k + j] -= factor * sub[col * k + j];
            }
        }
    }
    Ok((det, max_abs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::Backend;
    use crate::oracle::reference_marginal_variance;
    use crate::quad::gauss_legendre;
    use crate::sampling::latin_hypercube;
    use crate::surrogate::{RbfKernelParams, Surrogate};
    use crate::testfuncs::counter_normal;
    use approx::assert_abs_diff_eq;
    use faer::{Mat, Side};
    use ndarray::Array2;

    fn small_gp(n: usize, m: usize, l: usize, seed: u64, lambda: f64) -> Surrogate {
        let inputs = latin_hypercube(n, m, seed);
        let targets = Array2::from_shape_fn((n, l), |(i, out)| {
            let mut acc = 0.0;
            for j in 0..m {
                acc += ((2.0 + out as f64) * inputs[[i, j]] + 0.7 * out as f64).sin();
            }
            acc
        });
        let params: Vec<RbfKernelParams> = (0..l)
            .map(|out| {
                RbfKernelParams::new(
                    (0..m).map(|j| lambda * (1.0 + 0.15 * (out + j) as f64)).collect(),
                    1.1 - 0.1 * out as f64,
                    5e-4,
                )
                .unwrap()
            })
            .collect();
        Surrogate::from_parts(inputs, &targets, params).unwrap()
    }

    fn engine(s: &Surrogate) -> MomentEngine<'_> {
        MomentEngine::new(s, Backend::Quadrature, 0.0).unwrap()
    }

    #[test]
    fn toy_linear_model_recovers_half_matrices() {
        // Two outputs w(u₀)+w(u₁) and w(u₀)−w(u₁) with w = √3(2u−1): each
        // axis carries half the variance of both outputs, with the sign of
        // the cross-correlation flipping between the axes.
        fn w(u: f64) -> f64 {
            3.0_f64.sqrt() * (2.0 * u - 1.0)
        }
        fn mean(u: &[f64], out: &mut [f64]) {
            out[0] = w(u[0]) + w(u[1]);
            out[1] = w(u[0]) - w(u[1]);
        }
        let full = AxisSet::full(2);
        let v_full = reference_marginal_variance(2, 2, 16, &full, mean);
        let d: Vec<f64> = (0..2).map(|l| v_full[(l, l)].sqrt()).collect();
        for (axis, sign) in [(0usize, 1.0), (1usize, -1.0)] {
            let m = AxisSet::single(axis, 2).unwrap();
            let v = reference_marginal_variance(2, 2, 16, &m, mean);
            let s = closed_sobol_matrix(&v, &d).unwrap();
            for l in 0..2 {
                for lp in 0..2 {
                    let expected = if l == lp { 0.5 } else { sign * 0.5 };
                    assert_abs_diff_eq!(s[(l, lp)], expected, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn sobol_matrix_rejects_degenerate_scales() {
        let v = Matrix::zeros(2, 2);
        let err = closed_sobol_matrix(&v, &[1.0, 0.0]).unwrap_err();
        assert_eq!(err, Error::DivisionByZero { l: 1, lp: 1 });
    }

    #[test]
    fn total_matrix_trivial_cases() {
        let s = small_gp(12, 2, 2, 21, 0.5);
        let eng = engine(&s);
        let full = AxisSet::full(2);
        let reports = compute_reports(&eng, &[full.clone(), AxisSet::empty(2)]).unwrap();
        // m = M retains everything: the complement total is zero.
        assert!(reports[0].s_total.max_abs() < 1e-12);
        // m = ∅ retains nothing: the complement total is S_M itself.
        let s_full = closed_sobol_matrix(&reports[0].v, &reports[0].d).unwrap();
        assert!(reports[1].s_total.max_abs_diff(&s_full).unwrap() < 1e-12);
        assert!(reports[1].s.max_abs() == 0.0);
    }

    #[test]
    fn full_subset_closed_matrix_has_unit_diagonal_and_zero_error_diagonal() {
        let s = small_gp(14, 3, 3, 22, 0.45);
        let eng = engine(&s);
        let full = AxisSet::full(3);
        let reports = compute_reports(&eng, &[full]).unwrap();
        for l in 0..3 {
            assert_abs_diff_eq!(reports[0].s[(l, l)], 1.0, epsilon = 1e-12);
            assert_eq!(reports[0].t[(l, l)], 0.0, "clamped diagonal must be exact");
        }
    }

    #[test]
    fn error_matrices_are_nonnegative_and_total_error_adds() {
        let s = small_gp(14, 2, 3, 23, 0.4);
        let eng = engine(&s);
        let subsets = vec![AxisSet::single(0, 2).unwrap(), AxisSet::single(1, 2).unwrap()];
        let reports = compute_reports(&eng, &subsets).unwrap();
        let full_reports = compute_reports(&eng, &[AxisSet::full(2)]).unwrap();
        for report in &reports {
            for l in 0..3 {
                for lp in 0..3 {
                    assert!(report.t[(l, lp)] >= 0.0);
                    assert_abs_diff_eq!(
                        report.t_total[(l, lp)],
                        full_reports[0].t[(l, lp)] + report.t[(l, lp)],
                        epsilon = 1e-15
                    );
                }
            }
        }
    }

    #[test]
    fn genuinely_negative_q_is_an_error() {
        // Fabricated slices with a large negative variance term whose
        // internal term scale is as small as it can honestly be (the scale
        // always bounds the entry), so the negative is beyond round-off.
        let mut c1 = Matrix::zeros(1, 1);
        c1[(0, 0)] = -1.0;
        let mut c1_scale = Matrix::zeros(1, 1);
        c1_scale[(0, 0)] = 1.0;
        let slices = ErrorSlices {
            c1,
            c2: Matrix::zeros(1, 1),
            c1_scale,
            c2_scale: Matrix::zeros(1, 1),
        };
        let v = Matrix::zeros(1, 1);
        let (q, pre, post) = q_matrix(&slices, &[0.0], &[0.0], &v, &[1.0]);
        let err = error_matrix_from_q(&q, &pre, &post, &[1.0], &[f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NegativeQ { l: 0, lp: 0, .. }));
    }

    #[test]
    fn scalar_diagonal_matches_single_output_engine() {
        // The diagonal of the closed Sobol' matrix must equal the scalar
        // closed index computed from each output in isolation.
        let n = 14;
        let inputs = latin_hypercube(n, 2, 24);
        let targets = Array2::from_shape_fn((n, 2), |(i, out)| {
            (inputs[[i, 0]] * (1.5 + out as f64)).sin() + inputs[[i, 1]].cos()
        });
        let params: Vec<RbfKernelParams> = (0..2)
            .map(|out| {
                RbfKernelParams::new(vec![0.5 + 0.1 * out as f64; 2], 1.0, 1e-3).unwrap()
            })
            .collect();
        let joint = Surrogate::from_parts(inputs.clone(), &targets, params.clone()).unwrap();
        let eng = engine(&joint);
        let m = AxisSet::single(0, 2).unwrap();
        let reports = compute_reports(&eng, &[m.clone()]).unwrap();
        for l in 0..2 {
            let column = Array2::from_shape_fn((n, 1), |(i, _)| targets[[i, l]]);
            let single =
                Surrogate::from_parts(inputs.clone(), &column, vec![params[l].clone()])
                    .unwrap();
            let single_eng = engine(&single);
            let v = single_eng.marginal_variance(&m).unwrap();
            let (v_full, _) = single_eng.total_variance().unwrap();
            let scalar = v[(0, 0)] / v_full[(0, 0)];
            assert_abs_diff_eq!(reports[0].s[(l, l)], scalar, epsilon = 1e-10);
        }
    }

    #[test]
    fn first_order_matrix_matches_bruteforce_reference() {
        let s = small_gp(12, 2, 2, 25, 0.5);
        let eng = engine(&s);
        let fo = first_order_matrix(&eng, 0).unwrap();
        // Reference: quadrature over the surrogate's own mean.
        let mean = |u: &[f64], out: &mut [f64]| {
            let arr = Array2::from_shape_fn((1, 2), |(_, j)| u[j]);
            let prediction = s.predict_mean(&arr).unwrap();
            out[0] = prediction[[0, 0]];
            out[1] = prediction[[0, 1]];
        };
        let m = AxisSet::single(0, 2).unwrap();
        let v = reference_marginal_variance(2, 2, 48, &m, mean);
        let v_full = reference_marginal_variance(2, 2, 48, &AxisSet::full(2), mean);
        let d: Vec<f64> = (0..2).map(|l| v_full[(l, l)].sqrt()).collect();
        let s_ref = closed_sobol_matrix(&v, &d).unwrap();
        assert!(fo.max_abs_diff(&s_ref).unwrap() < 1e-8);
    }

    #[test]
    fn report_invariants_hold_across_random_models() {
        for seed in [31, 32, 33, 34] {
            let s = small_gp(12, 3, 3, seed, 0.45);
            let eng = engine(&s);
            let subsets = vec![
                AxisSet::single(seed as usize % 3, 3).unwrap(),
                AxisSet::new(vec![0, 2], 3).unwrap(),
                AxisSet::full(3),
            ];
            let reports = compute_reports(&eng, &subsets).unwrap();
            for report in &reports {
                assert!(report.s.is_symmetric(1e-10));
                for l in 0..3 {
                    let s_ll = report.s[(l, l)];
                    assert!((-1e-3..=1.0 + 1e-3).contains(&s_ll), "diag {s_ll}");
                    let st_ll = report.s_total[(l, l)];
                    assert!((-1e-3..=1.0 + 1e-3).contains(&st_ll), "total diag {st_ll}");
                    for lp in 0..3 {
                        // Off-diagonal ordering bound: an input pair cannot
                        // correlate outputs beyond its own relevance to each.
                        let bound =
                            (report.s[(l, l)] * report.s[(lp, lp)]).max(0.0).sqrt() + 1e-3;
                        assert!(report.s[(l, lp)].abs() <= bound);
                        assert!(report.t[(l, lp)] >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn scalar_ordering_chain_holds() {
        let s = small_gp(16, 3, 2, 35, 0.4);
        let eng = engine(&s);
        let m = AxisSet::new(vec![0, 1], 3).unwrap();
        let closed = compute_reports(&eng, &[m.clone()]).unwrap();
        let fo: Vec<Matrix> =
            (0..2).map(|axis| first_order_matrix(&eng, axis).unwrap()).collect();
        // Total index of the same subset: S_M − S_{complement}.
        let comp_reports =
            compute_reports(&eng, &[m.complement()]).unwrap();
        for l in 0..2 {
            let sum_first: f64 = fo.iter().map(|f| f[(l, l)]).sum();
            let closed_ll = closed[0].s[(l, l)];
            let total_ll = comp_reports[0].s_total[(l, l)];
            assert!(
                sum_first <= closed_ll + 1e-3,
                "Σ first-order {sum_first} vs closed {closed_ll}"
            );
            assert!(
                closed_ll <= total_ll + 1e-3,
                "closed {closed_ll} vs total {total_ll}"
            );
        }
    }

    #[test]
    fn r_squared_diagnostic_matches_closed_diagonal() {
        let s = small_gp(14, 2, 2, 36, 0.45);
        let eng = engine(&s);
        let m = AxisSet::single(0, 2).unwrap();
        let reports = compute_reports(&eng, &[m.clone()]).unwrap();
        let r2 = r_squared(&eng, &m, 4096, 7).unwrap();
        for l in 0..2 {
            assert_abs_diff_eq!(r2[l], reports[0].s[(l, l)], epsilon = 0.02);
        }
    }

    #[test]
    fn kernel_offset_does_not_change_reports() {
        let s = small_gp(12, 2, 2, 37, 0.5);
        let plain = MomentEngine::new(&s, Backend::Quadrature, 0.0).unwrap();
        let shifted = MomentEngine::new(&s, Backend::Quadrature, 2.5).unwrap();
        let m = AxisSet::single(0, 2).unwrap();
        let a = compute_reports(&plain, &[m.clone()]).unwrap();
        let b = compute_reports(&shifted, &[m]).unwrap();
        assert_eq!(a[0].s.max_abs_diff(&b[0].s).unwrap(), 0.0);
        assert_eq!(a[0].t.max_abs_diff(&b[0].t).unwrap(), 0.0);
        assert_eq!(a[0].t_total.max_abs_diff(&b[0].t_total).unwrap(), 0.0);
    }

    #[test]
    fn taylor_error_matches_posterior_draw_dispersion() {
        // Brute-force check of the whole Q pipeline: sample posterior draws
        // of a one-axis surrogate, compute the random S matrix per draw by
        // quadrature over the drawn path, and compare the elementwise
        // standard deviation with the Taylor estimate T.
        let n = 10;
        let inputs = latin_hypercube(n, 1, 40);
        let targets = Array2::from_shape_fn((n, 2), |(i, out)| {
            (3.0 * inputs[[i, 0]] + out as f64).sin() + 0.5 * inputs[[i, 0]]
        });
        let params: Vec<RbfKernelParams> = (0..2)
            .map(|out| {
                RbfKernelParams::new(vec![0.35 + 0.05 * out as f64], 1.0, 1e-3).unwrap()
            })
            .collect();
        let s = Surrogate::from_parts(inputs, &targets, params).unwrap();
        let eng = engine(&s);
        let full = AxisSet::full(1);
        let reports = compute_reports(&eng, &[full.clone()]).unwrap();
        let t_01 = reports[0].t[(0, 1)];
        assert!(t_01 > 1e-6, "test needs visible posterior uncertainty");

        // Posterior draws on a quadrature grid.
        let rule = gauss_legendre(32);
        let grid = Array2::from_shape_fn((32, 1), |(i, _)| rule.nodes[i]);
        let mean = s.predict_mean(&grid).unwrap();
        let kernels = s.posterior_kernel(&grid, &grid).unwrap();
        let factors: Vec<Mat<f64>> = kernels
            .iter()
            .map(|k| {
                let jitter = 1e-12
                    * (0..32).map(|i| k[(i, i)]).sum::<f64>().max(1e-30)
                    / 32.0;
                let m = Mat::from_fn(32, 32, |i, j| {
                    k[(i, j)] + if i == j { jitter } else { 0.0 }
                });
                let llt = m.llt(Side::Lower).expect("posterior grid kernel is PD");
                let mut lower = Mat::zeros(32, 32);
                for i in 0..32 {
                    for j in 0..=i {
                        lower[(i, j)] = llt.L()[(i, j)];
                    }
                }
                lower
            })
            .collect();

        let draws = 10_000;
        let mut s01 = Vec::with_capacity(draws);
        for k in 0..draws {
            let mut path = [[0.0_f64; 32]; 2];
            for (out, factor) in factors.iter().enumerate() {
                let z: Vec<f64> = (0..32)
                    .map(|i| counter_normal(999, out as u64, (k * 32 + i) as u64))
                    .collect();
                for i in 0..32 {
                    let mut acc = mean[[i, out]];
                    for j in 0..=i {
                        acc += factor[(i, j)] * z[j];
                    }
                    path[out][i] = acc;
                }
            }
            // Quadrature moments of the drawn paths.
            let mut mu = [0.0_f64; 2];
            for out in 0..2 {
                for i in 0..32 {
                    mu[out] += rule.weights[i] * path[out][i];
                }
            }
            let mut v = [[0.0_f64; 2]; 2];
            for a in 0..2 {
                for d in 0..2 {
                    for i in 0..32 {
                        v[a][d] +=
                            rule.weights[i] * (path[a][i] - mu[a]) * (path[d][i] - mu[d]);
                    }
                }
            }
            s01.push(v[0][1] / (v[0][0] * v[1][1]).sqrt());
        }
        let mean_s: f64 = s01.iter().sum::<f64>() / draws as f64;
        let sd: f64 = (s01.iter().map(|x| (x - mean_s) * (x - mean_s)).sum::<f64>()
            / (draws - 1) as f64)
            .sqrt();
        let rel = (t_01 - sd).abs() / sd;
        assert!(
            rel < 0.25,
            "Taylor error {t_01:.5} vs sampled dispersion {sd:.5} (rel {rel:.3})"
        );
    }

    #[test]
    fn filter_flags_and_masks_window_violations() {
        let s = small_gp(12, 2, 3, 41, 0.5);
        let eng = engine(&s);
        let m = AxisSet::single(0, 2).unwrap();
        let mut reports = compute_reports(&eng, &[m]).unwrap();
        // Clean reports pass through untouched.
        let (clean, log) = filter_reports(&reports, FILTER_WINDOW);
        assert!(log.is_empty());
        assert!(clean[0].s.max_abs_diff(&reports[0].s).unwrap() == 0.0);

        // An impossible diagonal index removes that output...
        reports[0].s[(2, 2)] = 1.5;
        let (filtered, log) = filter_reports(&reports, FILTER_WINDOW);
        assert_eq!(log.len(), 1);
        assert_eq!((log[0].matrix, log[0].l), ("S", 2));
        assert_eq!(filtered[0].diagnostics.removed_outputs, vec![2]);
        assert!(filtered[0].s[(2, 0)].is_nan() && filtered[0].s[(0, 2)].is_nan());
        assert!(!filtered[0].s[(0, 1)].is_nan());

        // ...and an impossible error entry removes both participants.
        reports[0].s[(2, 2)] = 0.5;
        reports[0].t[(0, 1)] = 1.2;
        let (filtered, log) = filter_reports(&reports, FILTER_WINDOW);
        assert_eq!(log.len(), 1);
        assert_eq!(filtered[0].diagnostics.removed_outputs, vec![0, 1]);
        assert!(filtered[0].s[(0, 0)].is_nan());
        assert!(filtered[0].s[(1, 1)].is_nan());
        assert!(!filtered[0].s[(2, 2)].is_nan());
    }

    #[test]
    fn submatrix_summary_computes_determinant_and_max() {
        let mut m = Matrix::zeros(3, 3);
        for l in 0..3 {
            m[(l, l)] = 1.0;
        }
        m[(0, 1)] = 0.5;
        m[(1, 0)] = 0.5;
        m[(2, 2)] = -2.0;
        let (det, max_abs) = submatrix_summary(&m, &[0, 1]).unwrap();
        assert_abs_diff_eq!(det, 0.75, epsilon = 1e-14);
        assert_abs_diff_eq!(max_abs, 1.0, epsilon = 1e-14);
        let (det3, max3) = submatrix_summary(&m, &[0, 1, 2]).unwrap();
        assert_abs_diff_eq!(det3, -1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(max3, 2.0, epsilon = 1e-14);
        assert!(submatrix_summary(&m, &[5]).is_err());
    }
}
