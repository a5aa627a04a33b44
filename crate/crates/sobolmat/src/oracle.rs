//! Independent estimators used to cross-check the moment pipeline.
//!
//! Two families live here, both deliberately built on machinery *disjoint*
//! from the production path so that agreement between the two is evidence of
//! correctness rather than shared bugs:
//!
//! 1. [`pick_freeze_closed_matrix`] — a quasi-Monte-Carlo pick-freeze
//!    estimator of the closed Sobol' matrix of any deterministic multi-output
//!    function. For a subset `m` it pairs each sample `u` with a companion
//!    `u'` that *freezes* the coordinates in `m` and redraws ("picks") the
//!    rest, so that `E[f_l(u)·f_{l'}(u')] − μ_l·μ_{l'}` estimates the
//!    covariance `V_m[l,l']` of the conditional means. The estimate is
//!    symmetrized both over the output pair and over which argument carries
//!    the fresh complement draw.
//!
//! 2. `reference_*` — brute-force nested Gauss–Legendre evaluations of the
//!    marginalized moments of a model given by explicit mean and kernel
//!    callbacks. Exponential-cost in the input dimension, so only usable for
//!    `M ≤ 3`, but accurate to near machine precision there. These pin down
//!    the moment engine's `V` and `W` values at small scale.

use crate::axes::AxisSet;
use crate::error::{Error, Result};
use crate::qmc::{SobolSequence, MAX_SAMPLES};
use crate::quad::gauss_legendre;
use crate::tensor::{Matrix, Tensor4};

/// Raw output of the pick-freeze estimator before and after normalization.
#[derive(Debug, Clone)]
pub struct PickFreezeEstimate {
    /// Estimated marginal covariance `V_m`.
    pub v: Matrix,
    /// Estimated closed Sobol' matrix `S_m = V_m / (D ⊗ D)`.
    pub s: Matrix,
    /// Estimated per-output total standard deviations `D`.
    pub d: Vec<f64>,
    /// Pooled per-output means.
    pub mean: Vec<f64>,
}

/// Pick-freeze estimate of the closed Sobol' matrix of a deterministic
/// function.
///
/// `f` fills `out` (length `l_outs`) with the outputs at a point of the
/// `m_dims`-cube. `n_points` is the number of sample *pairs* per replicate,
/// capped at 2¹⁶ by the scrambled-sequence generator; `replicates` further
/// seeds are averaged for accuracy beyond a single stream's worth.
pub fn pick_freeze_closed_matrix(
    mut f: impl FnMut(&[f64], &mut [f64]) -> Result<()>,
    m_dims: usize,
    l_outs: usize,
    m: &AxisSet,
    n_points: u32,
    seed: u32,
    replicates: u32,
) -> Result<PickFreezeEstimate> {
    if m.ambient() != m_dims {
        return Err(Error::invalid_subset(m, m_dims));
    }
    if n_points < 2 || n_points > MAX_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "pick-freeze needs between 2 and {MAX_SAMPLES} point pairs, got {n_points}"
        )));
    }
    let replicates = replicates.max(1);
    let keep = m.len();
    let fresh = m_dims - keep;
    let qmc_dims = keep + 2 * fresh;

    let mut sum = vec![0.0; l_outs];
    let mut cross = Matrix::zeros(l_outs, l_outs);
    let mut auto = Matrix::zeros(l_outs, l_outs);
    let mut q = vec![0.0; qmc_dims];
    let mut u = vec![0.0; m_dims];
    let mut up = vec![0.0; m_dims];
    let mut y = vec![0.0; l_outs];
    let mut yp = vec![0.0; l_outs];

    for r in 0..replicates {
        let seq = SobolSequence::new(qmc_dims, seed.wrapping_add(r.wrapping_mul(0x9e37_79b9)));
        for i in 0..n_points {
            seq.fill_point(i, &mut q);
            // Shared coordinates on the kept axes, fresh draws elsewhere.
            let mut kept = 0;
            let mut freshed = 0;
            for axis in 0..m_dims {
                if m.contains(axis) {
                    u[axis] = q[kept];
                    up[axis] = q[kept];
                    kept += 1;
                } else {
                    u[axis] = q[keep + freshed];
                    up[axis] = q[keep + fresh + freshed];
                    freshed += 1;
                }
            }
            f(&u, &mut y)?;
            f(&up, &mut yp)?;
            for l in 0..l_outs {
                sum[l] += y[l] + yp[l];
                for lp in 0..l_outs {
                    cross[(l, lp)] += y[l] * yp[lp];
                    auto[(l, lp)] += 0.5 * (y[l] * y[lp] + yp[l] * yp[lp]);
                }
            }
        }
    }

    let pairs = f64::from(n_points) * f64::from(replicates);
    let mean: Vec<f64> = sum.iter().map(|s| s / (2.0 * pairs)).collect();
    let mut v = Matrix::zeros(l_outs, l_outs);
    let mut v_full = Matrix::zeros(l_outs, l_outs);
    for l in 0..l_outs {
        for lp in 0..l_outs {
            v[(l, lp)] =
                0.5 * (cross[(l, lp)] + cross[(lp, l)]) / pairs - mean[l] * mean[lp];
            v_full[(l, lp)] = auto[(l, lp)] / pairs - mean[l] * mean[lp];
        }
    }
    let mut d = vec![0.0; l_outs];
    for l in 0..l_outs {
        let var = v_full[(l, l)];
        if var <= f64::EPSILON * (1.0 + mean[l] * mean[l]) {
            return Err(Error::ZeroVariance { output: l });
        }
        d[l] = var.sqrt();
    }
    let s = v.hadamard_div(&Matrix::outer(&d, &d))?;
    Ok(PickFreezeEstimate { v, s, d, mean })
}

/// A model exposed to the brute-force quadrature references through callbacks.
///
/// `mean(u, out)` fills the `L` mean outputs at `u`; `kernel(l, lp, u, up)`
/// returns the `(l, l')` entry of the second central moment (covariance
/// kernel) between points `u` and `u'`. For a deterministic function the
/// kernel is identically zero and `mean` is the function itself.
pub struct ReferenceModel<F, K> {
    /// Input dimension `M`.
    pub m_dims: usize,
    /// Output count `L`.
    pub l_outs: usize,
    /// Mean callback.
    pub mean: F,
    /// Kernel callback.
    pub kernel: K,
}

/// Full tensor grid over the unit cube with per-point weights, plus the
/// factorized grouping needed to marginalize subsets cheaply.
struct Grid {
    /// All grid points, row `g` holding `M` coordinates.
    points: Vec<Vec<f64>>,
    /// Product quadrature weight per point.
    weights: Vec<f64>,
    order: usize,
    m_dims: usize,
}

impl Grid {
    fn build(m_dims: usize, order: usize) -> Self {
        let rule = gauss_legendre(order);
        let count = order.pow(m_dims as u32);
        let mut points = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        for g in 0..count {
            let mut point = vec![0.0; m_dims];
            let mut w = 1.0;
            let mut rest = g;
            for axis in 0..m_dims {
                let k = rest % order;
                rest /= order;
                point[axis] = rule.nodes[k];
                w *= rule.weights[k];
            }
            points.push(point);
            weights.push(w);
        }
        Self { points, weights, order, m_dims }
    }

    /// Index of the sub-grid over the axes of `m` that point `g` projects to,
    /// and the quadrature weight of its complement part.
    fn project(&self, g: usize, m: &AxisSet) -> (usize, f64) {
        let rule = gauss_legendre(self.order);
        let mut rest = g;
        let mut sub = 0;
        let mut stride = 1;
        let mut w_comp = 1.0;
        for axis in 0..self.m_dims {
            let k = rest % self.order;
            rest /= self.order;
            if m.contains(axis) {
                sub += k * stride;
                stride *= self.order;
            } else {
                w_comp *= rule.weights[k];
            }
        }
        (sub, w_comp)
    }
}

/// Marginal means over the sub-grid of `m`: `table[sub][l] = μ_m`, plus the
/// per-sub-grid-point outer weights and the fully marginalized mean `μ_∅`.
fn marginal_mean_table<F: FnMut(&[f64], &mut [f64])>(
    grid: &Grid,
    l_outs: usize,
    m: &AxisSet,
    mean: &mut F,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let sub_count = grid.order.pow(m.len() as u32);
    let mut table = vec![vec![0.0; l_outs]; sub_count];
    let mut sub_w = vec![0.0; sub_count];
    let mut mu0 = vec![0.0; l_outs];
    let mut out = vec![0.0; l_outs];
    for g in 0..grid.points.len() {
        (mean)(&grid.points[g], &mut out);
        let (sub, w_comp) = grid.project(g, m);
        for l in 0..l_outs {
            table[sub][l] += w_comp * out[l];
            mu0[l] += grid.weights[g] * out[l];
        }
        sub_w[sub] += w_comp;
    }
    // Each sub-grid point's complement weights sum to 1; replace the
    // accumulated total with the exact outer weight product.
    let rule = gauss_legendre(grid.order);
    for (sub, w) in sub_w.iter_mut().enumerate() {
        let mut rest = sub;
        let mut prod = 1.0;
        for _ in 0..m.len() {
            prod *= rule.weights[rest % grid.order];
            rest /= grid.order;
        }
        *w = prod;
    }
    (table, sub_w, mu0)
}

/// Brute-force `V_m = E_m[μ̃_m ⊗ μ̃_m]` by nested tensor quadrature.
///
/// Cost `order^M`; intended for `M ≤ 3`.
pub fn reference_marginal_variance<F: FnMut(&[f64], &mut [f64])>(
    m_dims: usize,
    l_outs: usize,
    order: usize,
    m: &AxisSet,
    mut mean: F,
) -> Matrix {
    let grid = Grid::build(m_dims, order);
    let (table, sub_w, mu0) = marginal_mean_table(&grid, l_outs, m, &mut mean);
    let mut v = Matrix::zeros(l_outs, l_outs);
    for (sub, mu) in table.iter().enumerate() {
        for l in 0..l_outs {
            for lp in 0..l_outs {
                v[(l, lp)] += sub_w[sub] * (mu[l] - mu0[l]) * (mu[lp] - mu0[lp]);
            }
        }
    }
    v
}

/// Brute-force closed Sobol' matrix of a deterministic function by nested
/// quadrature: `V_m` and `V_M` from [`reference_marginal_variance`], then
/// `S = V_m / (D ⊗ D)`.
pub fn reference_closed_matrix<F: FnMut(&[f64], &mut [f64]) + Copy>(
    m_dims: usize,
    l_outs: usize,
    order: usize,
    m: &AxisSet,
    mean: F,
) -> Result<Matrix> {
    let v = reference_marginal_variance(m_dims, l_outs, order, m, mean);
    let v_full =
        reference_marginal_variance(m_dims, l_outs, order, &AxisSet::full(m_dims), mean);
    let d: Vec<f64> = (0..l_outs).map(|l| v_full[(l, l)].sqrt()).collect();
    v.hadamard_div(&Matrix::outer(&d, &d))
}

/// Brute-force covariance-of-variances tensor
/// `W_{mm'}[a,b,c,d] = Cov(V̂_m[a,b], V̂_{m'}[c,d])` to first order in the
/// kernel, evaluated directly from its permutation-sum form
///
/// ```text
/// W[a,b,c,d] = Σ over the four pairings of E_m E_m'[ μ̃_m ⊗ κ_mm' ⊗ μ̃_m' ]
/// ```
///
/// with the doubly marginalized kernel `κ_mm'` computed by full nested
/// quadrature. Cost `order^{2M}` kernel evaluations per output pair.
pub fn reference_covariance_of_variances<F, K>(
    model: &mut ReferenceModel<F, K>,
    order: usize,
    m: &AxisSet,
    mp: &AxisSet,
) -> Tensor4
where
    F: FnMut(&[f64], &mut [f64]),
    K: FnMut(usize, usize, &[f64], &[f64]) -> f64,
{
    let (m_dims, l_outs) = (model.m_dims, model.l_outs);
    let grid = Grid::build(m_dims, order);
    let (mu_m, w_m, mu0) = marginal_mean_table(&grid, l_outs, m, &mut model.mean);
    let (mu_mp, w_mp, _) = marginal_mean_table(&grid, l_outs, mp, &mut model.mean);
    let nm = mu_m.len();
    let nmp = mu_mp.len();

    // κ[b][c][sub_m][sub_m']: kernel marginalized over both complements.
    let mut kappa = vec![vec![vec![vec![0.0; nmp]; nm]; l_outs]; l_outs];
    for g in 0..grid.points.len() {
        let (sub_g, wg_comp) = grid.project(g, m);
        for h in 0..grid.points.len() {
            let (sub_h, wh_comp) = grid.project(h, mp);
            let w = wg_comp * wh_comp;
            for b in 0..l_outs {
                for c in 0..l_outs {
                    kappa[b][c][sub_g][sub_h] +=
                        w * (model.kernel)(b, c, &grid.points[g], &grid.points[h]);
                }
            }
        }
    }

    // G[x][y][z] = E_m E_m'[ μ̃_m[x] · κ[y,z-side pairing] · μ̃_m'[...] ] for
    // the four pairings, assembled directly into W.
    let mut w_out = Tensor4::zeros([l_outs; 4]);
    let term = |i: usize, j: usize, k: usize, n: usize| -> f64 {
        let mut acc = 0.0;
        for (sub_g, mug) in mu_m.iter().enumerate() {
            let left = w_m[sub_g] * (mug[i] - mu0[i]);
            if left == 0.0 {
                continue;
            }
            let row = &kappa[j][k][sub_g];
            let mut inner = 0.0;
            for (sub_h, muh) in mu_mp.iter().enumerate() {
                inner += w_mp[sub_h] * row[sub_h] * (muh[n] - mu0[n]);
            }
            acc += left * inner;
        }
        acc
    };
    for a in 0..l_outs {
        for b in 0..l_outs {
            for c in 0..l_outs {
                for d in 0..l_outs {
                    w_out[[a, b, c, d]] = term(a, b, c, d)
                        + term(b, a, c, d)
                        + term(a, b, d, c)
                        + term(b, a, d, c);
                }
            }
        }
    }
    w_out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testfuncs::mnu9;
    use approx::assert_abs_diff_eq;

    /// The two-output toy model: a shared linear trend on axis 0 and an
    /// anti-correlated one on axis 1, each factor scaled to unit variance.
    fn toy(u: &[f64], out: &mut [f64]) {
        let w0 = 3.0_f64.sqrt() * (2.0 * u[0] - 1.0);
        let w1 = 3.0_f64.sqrt() * (2.0 * u[1] - 1.0);
        out[0] = w0 + w1;
        out[1] = w0 - w1;
    }

    #[test]
    fn quadrature_reference_solves_toy_exactly() {
        let m0 = AxisSet::single(0, 2).unwrap();
        let m1 = AxisSet::single(1, 2).unwrap();
        let s0 = reference_closed_matrix(2, 2, 8, &m0, |u, out| toy(u, out)).unwrap();
        let s1 = reference_closed_matrix(2, 2, 8, &m1, |u, out| toy(u, out)).unwrap();
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_abs_diff_eq!(s0[(i, j)], 0.5, epsilon = 1e-9);
            let expected = if i == j { 0.5 } else { -0.5 };
            assert_abs_diff_eq!(s1[(i, j)], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn pick_freeze_agrees_with_quadrature_on_toy() {
        let m0 = AxisSet::single(0, 2).unwrap();
        let est = pick_freeze_closed_matrix(
            |u, out| {
                toy(u, out);
                Ok(())
            },
            2,
            2,
            &m0,
            1 << 14,
            7,
            1,
        )
        .unwrap();
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_abs_diff_eq!(est.s[(i, j)], 0.5, epsilon = 5e-3);
        }
        assert!(est.s.is_symmetric(1e-12));
    }

    #[test]
    fn pick_freeze_full_subset_is_correlation() {
        let full = AxisSet::full(5);
        let est = pick_freeze_closed_matrix(
            |u, out| {
                out.copy_from_slice(&mnu9(u)?);
                Ok(())
            },
            5,
            9,
            &full,
            1 << 13,
            3,
            1,
        )
        .unwrap();
        // Full-model S is the correlation matrix: unit diagonal.
        for l in 0..9 {
            assert_abs_diff_eq!(est.s[(l, l)], 1.0, epsilon = 1e-10);
        }
        // Spot values against the published table (coarse at 2^13 points).
        assert_abs_diff_eq!(est.s[(0, 1)], 0.896, epsilon = 0.02);
        assert_abs_diff_eq!(est.s[(3, 4)], 0.944, epsilon = 0.02);
    }

    #[test]
    fn constant_output_is_rejected() {
        let m = AxisSet::single(0, 2).unwrap();
        let err = pick_freeze_closed_matrix(
            |u, out| {
                out[0] = u[0];
                out[1] = 42.0;
                Ok(())
            },
            2,
            2,
            &m,
            256,
            1,
            1,
        )
        .unwrap_err();
        assert_eq!(err, Error::ZeroVariance { output: 1 });
    }

    #[test]
    fn empty_subset_estimates_zero_matrix() {
        let est = pick_freeze_closed_matrix(
            |u, out| {
                toy(u, out);
                Ok(())
            },
            2,
            2,
            &AxisSet::empty(2),
            1 << 14,
            11,
            1,
        )
        .unwrap();
        assert!(est.s.max_abs() < 0.02, "S_∅ = {:?}", est.s);
    }

    #[test]
    fn reference_w_vanishes_for_zero_kernel() {
        let mut model = ReferenceModel {
            m_dims: 2,
            l_outs: 2,
            mean: |u: &[f64], out: &mut [f64]| toy(u, out),
            kernel: |_b: usize, _c: usize, _u: &[f64], _up: &[f64]| 0.0,
        };
        let m = AxisSet::single(0, 2).unwrap();
        let w = reference_covariance_of_variances(&mut model, 6, &m, &m);
        assert_eq!(w.max_abs(), 0.0);
    }

    #[test]
    fn reference_w_has_pair_symmetries_and_kills_constant_kernels() {
        // A smooth block-diagonal kernel plus a constant: the constant part
        // must contribute nothing (the marginal means are centralized), and
        // the permutation sum forces W[a,b,c,d] = W[b,a,c,d] = W[a,b,d,c].
        let kern = |b: usize, c: usize, u: &[f64], up: &[f64]| -> f64 {
            if b != c {
                return 0.0;
            }
            let d2: f64 = u.iter().zip(up).map(|(x, y)| (x - y) * (x - y)).sum();
            0.3 * (-d2 / 0.8).exp()
        };
        let m = AxisSet::single(0, 2).unwrap();
        let mp = AxisSet::full(2);
        let mut plain = ReferenceModel {
            m_dims: 2,
            l_outs: 2,
            mean: |u: &[f64], out: &mut [f64]| toy(u, out),
            kernel: kern,
        };
        let w = reference_covariance_of_variances(&mut plain, 10, &m, &mp);
        let mut shifted = ReferenceModel {
            m_dims: 2,
            l_outs: 2,
            mean: |u: &[f64], out: &mut [f64]| toy(u, out),
            kernel: |b: usize, c: usize, u: &[f64], up: &[f64]| {
                kern(b, c, u, up) + if b == c { 0.7 } else { 0.0 }
            },
        };
        let w_shifted = reference_covariance_of_variances(&mut shifted, 10, &m, &mp);
        assert!(w.max_abs() > 1e-3, "kernel should produce nonzero W");
        assert!(w.max_abs_diff(&w_shifted).unwrap() < 1e-10);
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        assert_abs_diff_eq!(
                            w[[a, b, c, d]],
                            w[[b, a, c, d]],
                            epsilon = 1e-12
                        );
                        assert_abs_diff_eq!(
                            w[[a, b, c, d]],
                            w[[a, b, d, c]],
                            epsilon = 1e-12
                        );
                    }
                }
            }
        }
    }
}
