//! Marginalized moments of the fitted surrogate over uniform inputs.
//!
//! Everything downstream (Sobol' matrices and their standard errors) is a
//! functional of two objects derived from the per-output GP posterior: the
//! posterior mean `μ(u)` and the posterior latent kernel `κ(u, u')`. With the
//! RBF kernel both factorize across input axes,
//!
//! ```text
//! μ_b(u)    = σ²_b Σ_n α_bn Π_j e_bj(u_j; X_nj),      e_bj(s; x) = exp(−(s−x)²/2λ²_bj),
//! κ_b(u,u') = k_b(u,u') − k_b(u,X) K_b⁻¹ k_b(X,u'),
//! ```
//!
//! so every marginalization over uniform axes reduces to products of a small
//! family of one-dimensional integrals:
//!
//! ```text
//! φ(x, λ)          = ∫₀¹ e(s; x) ds                        (error functions)
//! p(x,λ; x',λ')    = ∫₀¹ e(s; x) e'(s; x') ds              (Gaussian product)
//! Ψ(λ)             = ∫₀¹∫₀¹ exp(−(s−t)²/2λ²) ds dt
//! mix(x,λ; λ_b)    = ∫₀¹ e(s; x) φ(s, λ_b) ds              (kernel half-marginal)
//! trip(x,λ; λ_b; x',λ') = ∫₀¹∫₀¹ e(s;x) exp(−(s−t)²/2λ²_b) e'(t;x') ds dt
//! ```
//!
//! `φ`, `p` and `Ψ` have closed forms in `erf`; `mix` and `trip` couple two
//! integration variables through the kernel factor and are evaluated by
//! Gauss–Legendre quadrature whose order per axis adapts to the smallest
//! lengthscale on that axis. The [`Backend`] choice switches the `p` tables
//! between the closed form and quadrature; the two must agree to ~1e−8, which
//! is checked by tests and makes each backend a control on the other.
//!
//! # Marginal variance
//!
//! With centralized marginal means `μ̃_m = μ_m − μ_∅`, the marginal covariance
//! matrix of an axis subset `m` is `V_m[a,d] = E_m[μ̃_a μ̃_d]`, computed in
//! closed form as
//!
//! ```text
//! V_m[a,d] = σ²_a σ²_d β_aᵀ (Π_{j∈m} p_j^{ad}) β_d − μ_∅a μ_∅d,
//! β_x[n] = α_xn Π_{j∉m} φ(X_nj, λ_xj),
//! ```
//!
//! where `p_j^{ad}` is the N×N table of pairwise products on axis `j`.
//!
//! # Covariance of variance estimates
//!
//! The standard errors need `W_{mm'}[a,b,c,d] = Cov(V̂_m[a,b], V̂_{m'}[c,d])`,
//! which to first order in the posterior kernel is a sum over the four ways of
//! pairing one output index from each covariance with the kernel:
//!
//! ```text
//! W[a,b,c,d] = δ_bc G[a,b,d] + δ_ac G[b,a,d] + δ_bd G[a,b,c] + δ_ad G[b,a,c],
//! G_{mm'}[a,b,d] = E_m E_{m'}[ μ̃_a(u_m) · κ_b(u_m, u'_{m'}) · μ̃_d(u'_{m'}) ],
//! ```
//!
//! with `κ_b` doubly marginalized over the complements of `m` and `m'`
//! (independently — each factor of a variance estimate integrates its own
//! copy of the complementary axes). The Kronecker deltas reflect output
//! independence: the surrogate's cross-output posterior covariance is zero.
//!
//! `G` splits into a prior part (axis-factorized into `φ/p/Ψ/mix/trip`
//! products) and a data part `r̃_Lᵀ K_b⁻¹ r̃_R` built from the same pairwise
//! tables. A constant shift of the kernel, `κ_b + c` — the effect of adding
//! homoskedastic noise to the model — contributes `c·E[μ̃_a]·E[μ̃_d] = 0` to
//! every `G` entry because the means are centralized, so the engine's
//! `kernel_offset` participates in [`MomentEngine::marginal_second_moment`]
//! (where the shift is observable) and provably cancels from `V`, `W` and
//! everything built on them; those code paths never read it.
//!
//! The error formulas only consume three slices of `W`, all reachable from
//! `G` patterns with a repeated output index: `C1_m[a,b] = G_mm[a,b,a]`,
//! `C2_m[a,b] = G_mM[a,b,b]` and (as the diagonal of `C2` at `m = M`)
//! `w₃[b] = G_MM[b,b,b]`. [`MomentEngine::error_slices_batch`] computes these
//! for a whole subset schedule at once, amortizing the N×N table builds; the
//! general [`MomentEngine::covariance_of_variances`] assembles the full L⁴
//! tensor and is meant for small models and cross-checks (its cost grows as
//! L³ table rebuilds).

use std::cell::OnceCell;

use faer::Mat;
use ndarray::Array2;

use crate::axes::AxisSet;
use crate::error::{Error, Result};
use crate::quad::{gauss_legendre, Rule};
use crate::surrogate::Surrogate;
use crate::tensor::{Matrix, Tensor4};

/// How the pairwise 1D integral tables are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Error-function closed forms, evaluated entrywise. Exact but slow for
    /// large training sets (two `erf` calls per table entry).
    ClosedForm,
    /// Gauss–Legendre node tables composed by matrix products. Matches the
    /// closed form to ~1e−10 at the adaptive order and is much faster for
    /// large `N` because the inner loops become GEMM calls.
    Quadrature,
}

/// Smallest lengthscale the quadrature tables can resolve to full accuracy;
/// below `MIN_SUPPORTED_LENGTHSCALE` the engine refuses to build. A fitted
/// lengthscale three decades below the input range means the posterior mean
/// interpolates noise spikes, so refusing is more honest than integrating it
/// inaccurately.
const MIN_SUPPORTED_LENGTHSCALE: f64 = 5.5e-3;

/// Gauss–Legendre order resolving kernel factors of lengthscale `λ` on the
/// unit interval to ~1e−10, including triple products of such factors (the
/// `trip` tables behind the error slices) whose merged width shrinks to
/// `λ/√3` (empirically calibrated; see the backend cross-validation test).
fn order_for_lengthscale(lambda: f64) -> usize {
    let q = (4.5 / lambda).ceil() as usize + 8;
    q.clamp(12, 512)
}

/// `∫₀¹ exp(−(s−x)²/(2λ²)) ds` in closed form.
fn phi_closed(x: f64, lambda: f64) -> f64 {
    let denom = lambda * std::f64::consts::SQRT_2;
    lambda
        * (std::f64::consts::PI * 0.5).sqrt()
        * (libm::erf((1.0 - x) / denom) + libm::erf(x / denom))
}

/// `∫₀¹ e(s; x_a, λ_a) · e(s; x_d, λ_d) ds` in closed form: the product of
/// two Gaussians is a Gaussian with merged width `λ_c` and center `c`.
fn pair_closed(xa: f64, la: f64, xd: f64, ld: f64) -> f64 {
    let inv = 1.0 / (la * la) + 1.0 / (ld * ld);
    let lc = inv.sqrt().recip();
    let center = (xa / (la * la) + xd / (ld * ld)) / inv;
    let diff = xa - xd;
    let scale = (-0.5 * diff * diff / (la * la + ld * ld)).exp();
    scale * phi_closed(center, lc)
}

/// `∫₀¹∫₀¹ exp(−(s−t)²/(2λ²)) ds dt` in closed form.
fn psi_closed(lambda: f64) -> f64 {
    let denom = lambda * std::f64::consts::SQRT_2;
    2.0 * lambda * (std::f64::consts::PI * 0.5).sqrt() * libm::erf(1.0 / denom)
        - 2.0 * lambda * lambda * (1.0 - (-0.5 / (lambda * lambda)).exp())
}

/// Per-axis quadrature data shared by all outputs: the rule and, per output,
/// the node-by-training-point kernel tables.
struct AxisQuadrature {
    rule: Rule,
    /// `u[b][(q, n)] = e_bj(t_q; X_nj)`.
    u: Vec<Mat<f64>>,
    /// `wu[b] = diag(w) · u[b]`.
    wu: Vec<Mat<f64>>,
    /// `ew[b][(q, q')] = w_q w_q' exp(−(t_q−t_q')²/(2λ²_bj))`.
    ew: Vec<Mat<f64>>,
    /// `phi_nodes[b][q] = φ(t_q, λ_bj)`.
    phi_nodes: Vec<Vec<f64>>,
}

/// Per-kernel-output caches for the error-slice machinery (lazily built).
struct KernelSideCache {
    /// `K_b⁻¹ r̃_full` with `r̃_full = r^{bb}_M − μ_∅b h_b` the
    /// fully-retained data-side vector.
    omega2: Vec<f64>,
    /// `Σ_n α_bn Π_j mix^{bb}_j[n]` (full-subset mix contraction).
    mixdot_full: f64,
    /// Pre-cancellation magnitude `Σ_n |α_bn| Π_j mix^{bb}_j[n]`.
    mixdot_full_scale: f64,
}

/// Marginalization engine over a fitted surrogate.
///
/// Construction precomputes the 1D integral caches (`φ`, `Ψ`, `mix`, node
/// tables) for every output and axis; the heavier N×N table work happens
/// inside the variance/error queries. The engine is read-only over the
/// surrogate but keeps single-threaded lazy caches, so share the surrogate
/// across threads and give each thread its own engine.
pub struct MomentEngine<'a> {
    surrogate: &'a Surrogate,
    backend: Backend,
    kernel_offset: f64,
    axes: Vec<AxisQuadrature>,
    /// `phi[b][j][n] = φ(X_nj, λ_bj)`.
    phi: Vec<Vec<Vec<f64>>>,
    /// `psi[b][j] = Ψ(λ_bj)`.
    psi: Vec<Vec<f64>>,
    /// `psi_all[b] = Π_j Ψ(λ_bj)`.
    psi_all: Vec<f64>,
    /// `mix[x][y][j][n] = ∫ e_xj(s; X_nj) φ(s, λ_yj) ds`.
    mix: Vec<Vec<Vec<Vec<f64>>>>,
    /// `μ_∅b = σ²_b Σ_n α_bn Π_j φ(X_nj, λ_bj)`.
    grand_mean: Vec<f64>,
    /// `h[b][n] = σ²_b Π_j φ(X_nj, λ_bj)` (fully marginalized cross-kernel).
    h: Vec<Vec<f64>>,
    kernel_caches: OnceCell<Vec<KernelSideCache>>,
    total: OnceCell<(Matrix, Vec<f64>)>,
}

/// The two `G`-tensor slices feeding the standard-error formula for one
/// subset: `c1[a,b] = G_mm[a,b,a]` and `c2[a,b] = G_mM[a,b,b]`.
///
/// Each entry is a small difference of prior- and data-side terms that can
/// individually be many orders of magnitude larger than the result (they
/// scale like `σ⁴` times Gram-weighted sums). `c1_scale`/`c2_scale` record
/// the sum of the absolute magnitudes of those terms per entry: round-off in
/// an entry is bounded by machine epsilon times its scale times the Gram
/// condition number, which is what downstream clamping must compare against.
#[derive(Debug, Clone)]
pub(crate) struct ErrorSlices {
    pub(crate) c1: Matrix,
    pub(crate) c2: Matrix,
    pub(crate) c1_scale: Matrix,
    pub(crate) c2_scale: Matrix,
}

impl<'a> MomentEngine<'a> {
    /// Builds the engine and its 1D caches.
    ///
    /// `kernel_offset` is a constant added to the posterior kernel wherever
    /// the kernel itself is reported; it cancels identically from `V`, `W`
    /// and the Sobol'/error matrices (see the module docs).
    pub fn new(
        surrogate: &'a Surrogate,
        backend: Backend,
        kernel_offset: f64,
    ) -> Result<Self> {
        let n = surrogate.training_points();
        let m_dims = surrogate.input_dim();
        let l_outs = surrogate.output_count();
        if l_outs == 0 || n == 0 {
            return Err(Error::InvalidArgument(
                "moment engine needs a fitted surrogate with at least one output".into(),
            ));
        }
        for (b, model) in surrogate.models().iter().enumerate() {
            for (j, &lam) in model.params.lengthscales.iter().enumerate() {
                if !(lam.is_finite() && lam >= MIN_SUPPORTED_LENGTHSCALE) {
                    return Err(Error::IntegrationFailure {
                        context: format!(
                            "output {b} axis {j}: lengthscale {lam} below the resolvable \
                             minimum {MIN_SUPPORTED_LENGTHSCALE}"
                        ),
                    });
                }
            }
        }
        let inputs = surrogate.inputs();

        let mut axes = Vec::with_capacity(m_dims);
        for j in 0..m_dims {
            let min_lambda = surrogate
                .models()
                .iter()
                .map(|mo| mo.params.lengthscales[j])
                .fold(f64::INFINITY, f64::min);
            let rule = gauss_legendre(order_for_lengthscale(min_lambda));
            let q = rule.len();
            let mut u = Vec::with_capacity(l_outs);
            let mut wu = Vec::with_capacity(l_outs);
            let mut ew = Vec::with_capacity(l_outs);
            let mut phi_nodes = Vec::with_capacity(l_outs);
            for model in surrogate.models() {
                let lam = model.params.lengthscales[j];
                let inv2 = 0.5 / (lam * lam);
                let ub = Mat::from_fn(q, n, |qq, nn| {
                    let d = rule.nodes[qq] - inputs[[nn, j]];
                    (-d * d * inv2).exp()
                });
                let wub = Mat::from_fn(q, n, |qq, nn| rule.weights[qq] * ub[(qq, nn)]);
                let ewb = Mat::from_fn(q, q, |qa, qb| {
                    let d = rule.nodes[qa] - rule.nodes[qb];
                    rule.weights[qa] * rule.weights[qb] * (-d * d * inv2).exp()
                });
                phi_nodes.push(rule.nodes.iter().map(|&t| phi_closed(t, lam)).collect());
                u.push(ub);
                wu.push(wub);
                ew.push(ewb);
            }
            axes.push(AxisQuadrature { rule, u, wu, ew, phi_nodes });
        }

        let mut phi = vec![vec![vec![0.0; n]; m_dims]; l_outs];
        let mut psi = vec![vec![0.0; m_dims]; l_outs];
        for (b, model) in surrogate.models().iter().enumerate() {
            for j in 0..m_dims {
                let lam = model.params.lengthscales[j];
                for nn in 0..n {
                    phi[b][j][nn] = phi_closed(inputs[[nn, j]], lam);
                }
                psi[b][j] = psi_closed(lam);
            }
        }
        let psi_all: Vec<f64> = psi.iter().map(|row| row.iter().product()).collect();

        // mix[x][y][j][n] = Σ_q w_q e_xj(t_q; X_nj) φ(t_q, λ_yj).
        let mut mix = vec![vec![vec![Vec::new(); m_dims]; l_outs]; l_outs];
        for (x, row) in mix.iter_mut().enumerate() {
            for (y, cell) in row.iter_mut().enumerate() {
                for (j, axis) in axes.iter().enumerate() {
                    let q = axis.rule.len();
                    let mut v = vec![0.0; n];
                    for (nn, entry) in v.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for qq in 0..q {
                            acc += axis.wu[x][(qq, nn)] * axis.phi_nodes[y][qq];
                        }
                        *entry = acc;
                    }
                    cell[j] = v;
                }
            }
        }

        let mut f_prod = vec![vec![1.0; n]; l_outs];
        for b in 0..l_outs {
            for j in 0..m_dims {
                for nn in 0..n {
                    f_prod[b][nn] *= phi[b][j][nn];
                }
            }
        }
        let mut grand_mean = vec![0.0; l_outs];
        let mut h = Vec::with_capacity(l_outs);
        for (b, model) in surrogate.models().iter().enumerate() {
            let sf2 = model.params.signal_variance;
            grand_mean[b] = sf2
                * model
                    .dual_weights
                    .iter()
                    .zip(&f_prod[b])
                    .map(|(a, f)| a * f)
                    .sum::<f64>();
            h.push(f_prod[b].iter().map(|f| sf2 * f).collect());
        }

        Ok(Self {
            surrogate,
            backend,
            kernel_offset,
            axes,
            phi,
            psi,
            psi_all,
            mix,
            grand_mean,
            h,
            kernel_caches: OnceCell::new(),
            total: OnceCell::new(),
        })
    }

    /// The surrogate this engine marginalizes.
    pub fn surrogate(&self) -> &Surrogate {
        self.surrogate
    }

    /// Fully marginalized posterior mean `μ_∅` per output (≈ 0 for a fit to
    /// standardized targets).
    pub fn grand_mean(&self) -> &[f64] {
        &self.grand_mean
    }

    fn dims(&self) -> (usize, usize, usize) {
        (
            self.surrogate.training_points(),
            self.surrogate.input_dim(),
            self.surrogate.output_count(),
        )
    }

    fn check_subset(&self, m: &AxisSet) -> Result<()> {
        if m.ambient() != self.surrogate.input_dim() {
            return Err(Error::invalid_subset(m, self.surrogate.input_dim()));
        }
        Ok(())
    }

    /// Marginal posterior mean `μ_m` at points on the retained axes.
    ///
    /// `points` has one column per axis of `m` in ascending axis order. For
    /// the full set this is exactly `predict_mean`; for the empty set every
    /// row is `μ_∅`.
    pub fn marginal_mean(&self, m: &AxisSet, points: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_subset(m)?;
        if m.is_full() {
            return self.surrogate.predict_mean(points);
        }
        if points.ncols() != m.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} point columns", m.len()),
                got: format!("{}", points.ncols()),
            });
        }
        for row in points.rows() {
            for (col, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain { axis: m.axes()[col], value: v });
                }
            }
        }
        let (n, _, l_outs) = self.dims();
        let inputs = self.surrogate.inputs();
        let p = points.nrows();
        let mut out = Array2::zeros((p, l_outs));
        for (b, model) in self.surrogate.models().iter().enumerate() {
            let beta = self.beta(b, m);
            for i in 0..p {
                let mut acc = 0.0;
                for nn in 0..n {
                    let mut factor = beta[nn];
                    for (col, &j) in m.axes().iter().enumerate() {
                        let lam = model.params.lengthscales[j];
                        let d = points[[i, col]] - inputs[[nn, j]];
                        factor *= (-0.5 * d * d / (lam * lam)).exp();
                    }
                    acc += factor;
                }
                out[[i, b]] = model.params.signal_variance * acc;
            }
        }
        Ok(out)
    }

    /// Coefficient vector `β_x[n] = α_xn Π_{j∉m} φ(X_nj, λ_xj)`.
    fn beta(&self, x: usize, m: &AxisSet) -> Vec<f64> {
        let (n, m_dims, _) = self.dims();
        let alpha = &self.surrogate.models()[x].dual_weights;
        let mut beta: Vec<f64> = alpha.clone();
        for j in 0..m_dims {
            if !m.contains(j) {
                for nn in 0..n {
                    beta[nn] *= self.phi[x][j][nn];
                }
            }
        }
        beta
    }

    /// Pairwise product table `p^{xy}_j[n,n'] = ∫ e_xj(s; X_nj) e_yj(s; X_n'j) ds`
    /// by the configured backend.
    fn p_table(&self, x: usize, y: usize, j: usize) -> Mat<f64> {
        match self.backend {
            Backend::ClosedForm => {
                let inputs = self.surrogate.inputs();
                let lx = self.surrogate.models()[x].params.lengthscales[j];
                let ly = self.surrogate.models()[y].params.lengthscales[j];
                let n = self.surrogate.training_points();
                Mat::from_fn(n, n, |a, b| {
                    pair_closed(inputs[[a, j]], lx, inputs[[b, j]], ly)
                })
            }
            Backend::Quadrature => {
                let axis = &self.axes[j];
                axis.u[x].transpose() * &axis.wu[y]
            }
        }
    }

    /// Kernel-coupled table
    /// `trip^{xbd}_j[n,n'] = ∫∫ e_xj(s; X_nj) exp(−(s−t)²/2λ²_bj) e_dj(t; X_n'j) ds dt`.
    fn trip_table(&self, x: usize, b: usize, d: usize, j: usize) -> Mat<f64> {
        let axis = &self.axes[j];
        let right = &axis.ew[b] * &axis.u[d];
        axis.u[x].transpose() * &right
    }

    /// Hadamard-accumulates `tables[j]` over the axes of `m`; `None` for the
    /// empty subset (an implicit all-ones table).
    fn hadamard_subset(tables: &[Mat<f64>], m: &AxisSet) -> Option<Mat<f64>> {
        let mut acc: Option<Mat<f64>> = None;
        for &j in m.axes() {
            match &mut acc {
                None => acc = Some(tables[j].clone()),
                Some(theta) => {
                    let t = &tables[j];
                    for col in 0..theta.ncols() {
                        for row in 0..theta.nrows() {
                            theta[(row, col)] *= t[(row, col)];
                        }
                    }
                }
            }
        }
        acc
    }

    /// `leftᵀ · Θ · right`, with `Θ = None` meaning the all-ones matrix.
    fn bilinear(theta: Option<&Mat<f64>>, left: &[f64], right: &[f64]) -> f64 {
        match theta {
            None => {
                let sl: f64 = left.iter().sum();
                let sr: f64 = right.iter().sum();
                sl * sr
            }
            Some(t) => {
                let r = Mat::from_fn(right.len(), 1, |i, _| right[i]);
                let tr = t * &r;
                left.iter().enumerate().map(|(i, &l)| l * tr[(i, 0)]).sum()
            }
        }
    }

    /// `leftᵀ · Θ · right` together with its pre-cancellation magnitude
    /// `|left|ᵀ · |Θ| · |right|`. Dual-weight vectors oscillate in sign, so
    /// the contraction can cancel by many orders of magnitude; round-off and
    /// Gram conditioning losses scale with the magnitude, not the value.
    fn bilinear_scaled(theta: Option<&Mat<f64>>, left: &[f64], right: &[f64]) -> (f64, f64) {
        match theta {
            None => {
                let sl: f64 = left.iter().sum();
                let sr: f64 = right.iter().sum();
                let al: f64 = left.iter().map(|v| v.abs()).sum();
                let ar: f64 = right.iter().map(|v| v.abs()).sum();
                (sl * sr, al * ar)
            }
            Some(t) => {
                let mut value = 0.0;
                let mut scale = 0.0;
                // Column-major storage: keep the inner loop on the rows.
                for (k, &r) in right.iter().enumerate() {
                    let mut acc = 0.0;
                    let mut acc_abs = 0.0;
                    for (i, &l) in left.iter().enumerate() {
                        let term = l * t[(i, k)];
                        acc += term;
                        acc_abs += term.abs();
                    }
                    value += r * acc;
                    scale += r.abs() * acc_abs;
                }
                (value, scale)
            }
        }
    }

    /// `Θᵀ · left` as a vector, with `Θ = None` meaning the all-ones matrix.
    fn apply_transpose(theta: Option<&Mat<f64>>, left: &[f64], n: usize) -> Vec<f64> {
        match theta {
            None => {
                let s: f64 = left.iter().sum();
                vec![s; n]
            }
            Some(t) => {
                let l = Mat::from_fn(left.len(), 1, |i, _| left[i]);
                let tl = t.transpose() * &l;
                (0..n).map(|i| tl[(i, 0)]).collect()
            }
        }
    }

    /// `Θᵀ · left` together with the elementwise pre-cancellation magnitude
    /// `|Θ|ᵀ · |left|` (see [`Self::bilinear_scaled`]).
    fn apply_transpose_scaled(
        theta: Option<&Mat<f64>>,
        left: &[f64],
        n: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        match theta {
            None => {
                let s: f64 = left.iter().sum();
                let a: f64 = left.iter().map(|v| v.abs()).sum();
                (vec![s; n], vec![a; n])
            }
            Some(t) => {
                let mut out = vec![0.0; n];
                let mut out_abs = vec![0.0; n];
                for (k, out_k) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    let mut acc_abs = 0.0;
                    for (i, &l) in left.iter().enumerate() {
                        let term = t[(i, k)] * l;
                        acc += term;
                        acc_abs += term.abs();
                    }
                    *out_k = acc;
                    out_abs[k] = acc_abs;
                }
                (out, out_abs)
            }
        }
    }

    /// Marginal covariance matrices `V_m` for a whole subset schedule,
    /// sharing the per-output-pair axis tables across subsets.
    pub fn variance_batch(&self, subsets: &[AxisSet]) -> Result<Vec<Matrix>> {
        for m in subsets {
            self.check_subset(m)?;
        }
        let (_, m_dims, l_outs) = self.dims();
        let mut out = vec![Matrix::zeros(l_outs, l_outs); subsets.len()];
        let union = subsets
            .iter()
            .fold(AxisSet::empty(m_dims), |acc, m| acc.union(m).unwrap());
        for a in 0..l_outs {
            for d in a..l_outs {
                let mut tables: Vec<Mat<f64>> = Vec::with_capacity(m_dims);
                for j in 0..m_dims {
                    if union.contains(j) {
                        tables.push(self.p_table(a, d, j));
                    } else {
                        tables.push(Mat::zeros(0, 0));
                    }
                }
                let sa = self.surrogate.models()[a].params.signal_variance;
                let sd = self.surrogate.models()[d].params.signal_variance;
                for (si, m) in subsets.iter().enumerate() {
                    if m.is_empty() {
                        continue; // V_∅ = 0 exactly.
                    }
                    let theta = Self::hadamard_subset(&tables, m);
                    let beta_a = self.beta(a, m);
                    let beta_d = self.beta(d, m);
                    let quad = Self::bilinear(theta.as_ref(), &beta_a, &beta_d);
                    let v = sa * sd * quad - self.grand_mean[a] * self.grand_mean[d];
                    out[si][(a, d)] = v;
                    out[si][(d, a)] = v;
                }
            }
        }
        Ok(out)
    }

    /// Marginal covariance matrix `V_m = E_m[μ̃_m ⊗ μ̃_m]` (symmetric PSD;
    /// zero for the empty subset).
    pub fn marginal_variance(&self, m: &AxisSet) -> Result<Matrix> {
        Ok(self.variance_batch(std::slice::from_ref(m))?.pop().unwrap())
    }

    /// Total covariance `V_M` and total standard deviations `D` (cached).
    pub fn total_variance(&self) -> Result<(&Matrix, &[f64])> {
        if self.total.get().is_none() {
            let full = AxisSet::full(self.surrogate.input_dim());
            let v = self.marginal_variance(&full)?;
            let mut d = vec![0.0; v.rows()];
            for (l, entry) in d.iter_mut().enumerate() {
                let var = v[(l, l)];
                if !(var.is_finite() && var > 0.0) {
                    return Err(Error::ZeroVariance { output: l });
                }
                *entry = var.sqrt();
            }
            let _ = self.total.set((v, d));
        }
        let (v, d) = self.total.get().unwrap();
        Ok((v, d))
    }

    /// Doubly marginalized posterior kernel
    /// `μ_{mm'}(u, u') = E_c E_c'[κ(u, u')] + offset`, one P×P' block per
    /// output. Points carry one column per axis of their subset.
    pub fn marginal_second_moment(
        &self,
        m: &AxisSet,
        mp: &AxisSet,
        u: &Array2<f64>,
        up: &Array2<f64>,
    ) -> Result<Vec<Matrix>> {
        self.check_subset(m)?;
        self.check_subset(mp)?;
        for (set, pts) in [(m, u), (mp, up)] {
            if pts.ncols() != set.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} point columns", set.len()),
                    got: format!("{}", pts.ncols()),
                });
            }
            for row in pts.rows() {
                for (col, &v) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Domain { axis: set.axes()[col], value: v });
                    }
                }
            }
        }
        let (n, m_dims, l_outs) = self.dims();
        let inputs = self.surrogate.inputs();
        let (p, q) = (u.nrows(), up.nrows());
        // Column lookup: axis j -> column of the point matrix, if retained.
        let col_of = |set: &AxisSet| {
            let mut map = vec![usize::MAX; m_dims];
            for (c, &j) in set.axes().iter().enumerate() {
                map[j] = c;
            }
            map
        };
        let mcol = col_of(m);
        let mpcol = col_of(mp);

        let mut blocks = Vec::with_capacity(l_outs);
        for (b, model) in self.surrogate.models().iter().enumerate() {
            let sf2 = model.params.signal_variance;
            let lam = &model.params.lengthscales;
            // Data-side feature vectors v_m(u)[nn] for each query point.
            let feature = |set: &AxisSet, cols: &[usize], pts: &Array2<f64>, i: usize| {
                let mut f = vec![sf2; n];
                for j in 0..m_dims {
                    if set.contains(j) {
                        let x = pts[[i, cols[j]]];
                        let inv2 = 0.5 / (lam[j] * lam[j]);
                        for (nn, entry) in f.iter_mut().enumerate() {
                            let d = x - inputs[[nn, j]];
                            *entry *= (-d * d * inv2).exp();
                        }
                    } else {
                        for (nn, entry) in f.iter_mut().enumerate() {
                            *entry *= self.phi[b][j][nn];
                        }
                    }
                }
                f
            };
            let left: Vec<Vec<f64>> = (0..p).map(|i| feature(m, &mcol, u, i)).collect();
            let right: Vec<Vec<f64>> = (0..q).map(|k| feature(mp, &mpcol, up, k)).collect();
            let rhs = Mat::from_fn(n, q, |nn, k| right[k][nn]);
            let sol = self.surrogate.solve_gram(b, &rhs);

            let mut block = Matrix::zeros(p, q);
            for i in 0..p {
                for k in 0..q {
                    // Prior part: per-axis factor depends on which of the two
                    // arguments retain the axis.
                    let mut prior = sf2;
                    for j in 0..m_dims {
                        let in_m = m.contains(j);
                        let in_mp = mp.contains(j);
                        prior *= match (in_m, in_mp) {
                            (true, true) => {
                                let d = u[[i, mcol[j]]] - up[[k, mpcol[j]]];
                                (-0.5 * d * d / (lam[j] * lam[j])).exp()
                            }
                            (true, false) => phi_closed(u[[i, mcol[j]]], lam[j]),
                            (false, true) => phi_closed(up[[k, mpcol[j]]], lam[j]),
                            (false, false) => self.psi[b][j],
                        };
                    }
                    let mut data = 0.0;
                    for nn in 0..n {
                        data += left[i][nn] * sol[(nn, k)];
                    }
                    block[(i, k)] = prior - data + self.kernel_offset;
                }
            }
            blocks.push(block);
        }
        Ok(blocks)
    }

    /// Per-kernel-output caches for the error slices.
    fn kernel_caches(&self) -> &Vec<KernelSideCache> {
        self.kernel_caches.get_or_init(|| {
            let (n, m_dims, l_outs) = self.dims();
            let full = AxisSet::full(m_dims);
            let mut caches = Vec::with_capacity(l_outs);
            for b in 0..l_outs {
                let model = &self.surrogate.models()[b];
                let sf2 = model.params.signal_variance;
                let tables: Vec<Mat<f64>> =
                    (0..m_dims).map(|j| self.p_table(b, b, j)).collect();
                let theta = Self::hadamard_subset(&tables, &full);
                let alpha = &model.dual_weights;
                let r_full = Self::apply_transpose(theta.as_ref(), alpha, n);
                let rtilde_full: Vec<f64> = (0..n)
                    .map(|i| sf2 * sf2 * r_full[i] - self.grand_mean[b] * self.h[b][i])
                    .collect();
                let rhs = Mat::from_fn(n, 1, |i, _| rtilde_full[i]);
                let sol = self.surrogate.solve_gram(b, &rhs);
                let omega2: Vec<f64> = (0..n).map(|i| sol[(i, 0)]).collect();
                let mut mixdot_full = 0.0;
                let mut mixdot_full_scale = 0.0;
                for (nn, &a) in alpha.iter().enumerate() {
                    let mut prod = a;
                    for j in 0..m_dims {
                        prod *= self.mix[b][b][j][nn];
                    }
                    mixdot_full += prod;
                    mixdot_full_scale += prod.abs();
                }
                caches.push(KernelSideCache {
                    omega2,
                    mixdot_full,
                    mixdot_full_scale,
                });
            }
            caches
        })
    }

    /// `Π_{j∉m} Ψ(λ_bj)`.
    fn psi_excluded(&self, b: usize, m: &AxisSet) -> f64 {
        let (_, m_dims, _) = self.dims();
        let mut prod = 1.0;
        for j in 0..m_dims {
            if !m.contains(j) {
                prod *= self.psi[b][j];
            }
        }
        prod
    }

    /// `Σ_n α_an Π_{j∈m} mix^{ab}_j[n] Π_{j∉m} φ(X_nj, λ_aj)`.
    fn mixdot(&self, a: usize, b: usize, m: &AxisSet) -> f64 {
        let (n, m_dims, _) = self.dims();
        let alpha = &self.surrogate.models()[a].dual_weights;
        let mut acc = 0.0;
        for nn in 0..n {
            let mut prod = alpha[nn];
            for j in 0..m_dims {
                prod *= if m.contains(j) {
                    self.mix[a][b][j][nn]
                } else {
                    self.phi[a][j][nn]
                };
            }
            acc += prod;
        }
        acc
    }

    /// [`Self::mixdot`] together with its pre-cancellation magnitude
    /// `Σ_n |α_an| Π …` (the per-axis factors are nonnegative integrals).
    fn mixdot_scaled(&self, a: usize, b: usize, m: &AxisSet) -> (f64, f64) {
        let (n, m_dims, _) = self.dims();
        let alpha = &self.surrogate.models()[a].dual_weights;
        let mut acc = 0.0;
        let mut acc_abs = 0.0;
        for nn in 0..n {
            let mut prod = alpha[nn];
            for j in 0..m_dims {
                prod *= if m.contains(j) {
                    self.mix[a][b][j][nn]
                } else {
                    self.phi[a][j][nn]
                };
            }
            acc += prod;
            acc_abs += prod.abs();
        }
        (acc, acc_abs)
    }

    /// Error slices `C1_m` and `C2_m` for every subset in the schedule.
    ///
    /// Table builds (`trip`, `p`) are done once per output pair and reused
    /// across subsets, so pass the whole schedule rather than looping.
    pub(crate) fn error_slices_batch(&self, subsets: &[AxisSet]) -> Result<Vec<ErrorSlices>> {
        for m in subsets {
            self.check_subset(m)?;
        }
        let (n, m_dims, l_outs) = self.dims();
        let caches = self.kernel_caches();
        let mut slices = vec![
            ErrorSlices {
                c1: Matrix::zeros(l_outs, l_outs),
                c2: Matrix::zeros(l_outs, l_outs),
                c1_scale: Matrix::zeros(l_outs, l_outs),
                c2_scale: Matrix::zeros(l_outs, l_outs),
            };
            subsets.len()
        ];
        let union = subsets
            .iter()
            .fold(AxisSet::empty(m_dims), |acc, m| acc.union(m).unwrap());

        for b in 0..l_outs {
            let model_b = &self.surrogate.models()[b];
            let sb2 = model_b.params.signal_variance;
            let p4 = sb2 * self.psi_all[b];
            // Right factors Ew_b · U_b shared by all trip^{abb} tables.
            let rbb: Vec<Mat<f64>> = (0..m_dims)
                .map(|j| &self.axes[j].ew[b] * &self.axes[j].u[b])
                .collect();
            for a in 0..l_outs {
                let model_a = &self.surrogate.models()[a];
                let sa2 = model_a.params.signal_variance;
                let mu_a = self.grand_mean[a];
                let mu_b = self.grand_mean[b];

                // Pass 1: C1 priors and the shared data-side vectors.
                let mut rtilde_per_subset: Vec<Vec<f64>> = Vec::with_capacity(subsets.len());
                let mut rtilde_scale_per_subset: Vec<Vec<f64>> =
                    Vec::with_capacity(subsets.len());
                let mut p3_per_subset: Vec<f64> = Vec::with_capacity(subsets.len());
                let mut p3_scale_per_subset: Vec<f64> = Vec::with_capacity(subsets.len());
                {
                    let mut trip1: Vec<Mat<f64>> = Vec::with_capacity(m_dims);
                    let mut pab: Vec<Mat<f64>> = Vec::with_capacity(m_dims);
                    for j in 0..m_dims {
                        if union.contains(j) {
                            trip1.push(self.trip_table(a, b, a, j));
                            pab.push(self.p_table(a, b, j));
                        } else {
                            trip1.push(Mat::zeros(0, 0));
                            pab.push(Mat::zeros(0, 0));
                        }
                    }
                    for (si, m) in subsets.iter().enumerate() {
                        let beta_a = self.beta(a, m);
                        let psi_ex = self.psi_excluded(b, m);
                        let theta1 = Self::hadamard_subset(&trip1, m);
                        let (bil1, bil1_scale) =
                            Self::bilinear_scaled(theta1.as_ref(), &beta_a, &beta_a);
                        let p1 = sa2 * sb2 * sa2 * bil1;
                        let p1_scale = sa2 * sb2 * sa2 * bil1_scale;
                        let (md, md_scale) = self.mixdot_scaled(a, b, m);
                        let p3 = sa2 * sb2 * md;
                        let p3_scale = sa2 * sb2 * md_scale;
                        let prior = p1 * psi_ex - 2.0 * mu_a * p3 * psi_ex
                            + mu_a * mu_a * p4;
                        let prior_scale = p1_scale * psi_ex
                            + 2.0 * mu_a.abs() * p3_scale * psi_ex
                            + mu_a * mu_a * p4;
                        // Data side: r_L[p] = σ²_aσ²_b (Π_{j∉m}φ_bj[p]) (Θ_pᵀ β_a)[p].
                        let theta_p = Self::hadamard_subset(&pab, m);
                        let (applied, applied_abs) =
                            Self::apply_transpose_scaled(theta_p.as_ref(), &beta_a, n);
                        let mut rtilde = vec![0.0; n];
                        let mut rtilde_scale = vec![0.0; n];
                        for p_i in 0..n {
                            let mut phi_ex = 1.0;
                            for j in 0..m_dims {
                                if !m.contains(j) {
                                    phi_ex *= self.phi[b][j][p_i];
                                }
                            }
                            rtilde[p_i] = sa2 * sb2 * phi_ex * applied[p_i]
                                - mu_a * self.h[b][p_i];
                            rtilde_scale[p_i] = sa2 * sb2 * phi_ex * applied_abs[p_i]
                                + (mu_a * self.h[b][p_i]).abs();
                        }
                        let rhs = Mat::from_fn(n, 1, |i, _| rtilde[i]);
                        let sol = self.surrogate.solve_gram(b, &rhs);
                        let mut data = 0.0;
                        let mut data_scale = 0.0;
                        for i in 0..n {
                            data += rtilde[i] * sol[(i, 0)];
                            data_scale += rtilde_scale[i] * sol[(i, 0)].abs();
                        }
                        slices[si].c1[(a, b)] = prior - data;
                        slices[si].c1_scale[(a, b)] = prior_scale + data_scale;
                        rtilde_per_subset.push(rtilde);
                        rtilde_scale_per_subset.push(rtilde_scale);
                        p3_per_subset.push(p3);
                        p3_scale_per_subset.push(p3_scale);
                    }
                }

                // Pass 2: C2 priors against the fully-retained right side.
                {
                    let mut trip2: Vec<Mat<f64>> = Vec::with_capacity(m_dims);
                    for (j, r) in rbb.iter().enumerate() {
                        if union.contains(j) {
                            trip2.push(self.axes[j].u[a].transpose() * r);
                        } else {
                            trip2.push(Mat::zeros(0, 0));
                        }
                    }
                    // ρ_b[n'] = α_bn' Π_{j∉m} mix^{bb}_j[n'] — recomputed per
                    // subset below since it depends on m.
                    let alpha_b = &model_b.dual_weights;
                    let p2 = sb2 * sb2 * caches[b].mixdot_full;
                    let p2_scale = sb2 * sb2 * caches[b].mixdot_full_scale;
                    for (si, m) in subsets.iter().enumerate() {
                        let beta_a = self.beta(a, m);
                        let mut rho = alpha_b.clone();
                        for j in 0..m_dims {
                            if !m.contains(j) {
                                for (nn, r) in rho.iter_mut().enumerate() {
                                    *r *= self.mix[b][b][j][nn];
                                }
                            }
                        }
                        let theta2 = Self::hadamard_subset(&trip2, m);
                        let (bil2, bil2_scale) =
                            Self::bilinear_scaled(theta2.as_ref(), &beta_a, &rho);
                        let p1 = sa2 * sb2 * sb2 * bil2;
                        let p1_scale = sa2 * sb2 * sb2 * bil2_scale;
                        let psi_ex = self.psi_excluded(b, m);
                        let prior = p1 - mu_b * p3_per_subset[si] * psi_ex - mu_a * p2
                            + mu_a * mu_b * p4;
                        let prior_scale = p1_scale
                            + (mu_b * p3_scale_per_subset[si] * psi_ex).abs()
                            + mu_a.abs() * p2_scale
                            + (mu_a * mu_b * p4).abs();
                        let mut data = 0.0;
                        let mut data_scale = 0.0;
                        for (i, o) in caches[b].omega2.iter().enumerate() {
                            data += rtilde_per_subset[si][i] * o;
                            data_scale += rtilde_scale_per_subset[si][i] * o.abs();
                        }
                        slices[si].c2[(a, b)] = prior - data;
                        slices[si].c2_scale[(a, b)] = prior_scale + data_scale;
                    }
                }
            }
        }
        Ok(slices)
    }

    /// One entry of the `G` tensor for arbitrary subsets and output triple.
    ///
    /// General but unamortized: every call rebuilds its axis tables, so this
    /// is the reference path for [`Self::covariance_of_variances`] and for
    /// cross-checking the batched slices, not for production sweeps.
    fn g_value(&self, m: &AxisSet, mp: &AxisSet, a: usize, b: usize, d: usize) -> f64 {
        let (n, m_dims, _) = self.dims();
        let models = self.surrogate.models();
        let (sa2, sb2, sd2) = (
            models[a].params.signal_variance,
            models[b].params.signal_variance,
            models[d].params.signal_variance,
        );
        let (mu_a, mu_d) = (self.grand_mean[a], self.grand_mean[d]);

        // Prior part.
        let mut psi_prod = 1.0;
        for j in 0..m_dims {
            if !m.contains(j) && !mp.contains(j) {
                psi_prod *= self.psi[b][j];
            }
        }
        let mut gamma_l: Vec<f64> = models[a].dual_weights.clone();
        let mut gamma_r: Vec<f64> = models[d].dual_weights.clone();
        for j in 0..m_dims {
            for nn in 0..n {
                if m.contains(j) {
                    if !mp.contains(j) {
                        gamma_l[nn] *= self.mix[a][b][j][nn];
                    }
                } else {
                    gamma_l[nn] *= self.phi[a][j][nn];
                }
                if mp.contains(j) {
                    if !m.contains(j) {
                        gamma_r[nn] *= self.mix[d][b][j][nn];
                    }
                } else {
                    gamma_r[nn] *= self.phi[d][j][nn];
                }
            }
        }
        let inter = m.intersection(mp).unwrap();
        let trip_tables: Vec<Mat<f64>> = (0..m_dims)
            .map(|j| {
                if inter.contains(j) {
                    self.trip_table(a, b, d, j)
                } else {
                    Mat::zeros(0, 0)
                }
            })
            .collect();
        let theta = Self::hadamard_subset(&trip_tables, &inter);
        let p1 = sa2 * sb2 * sd2 * Self::bilinear(theta.as_ref(), &gamma_l, &gamma_r) * psi_prod;
        let p3 = sa2 * sb2 * self.psi_excluded(b, m) * self.mixdot(a, b, m);
        let p2 = sd2 * sb2 * self.psi_excluded(b, mp) * self.mixdot(d, b, mp);
        let p4 = sb2 * self.psi_all[b];
        let prior = p1 - mu_d * p3 - mu_a * p2 + mu_a * mu_d * p4;

        // Data part r̃_Lᵀ K_b⁻¹ r̃_R.
        let side = |x: usize, set: &AxisSet, mu_x: f64| -> Vec<f64> {
            let beta_x = self.beta(x, set);
            let tables: Vec<Mat<f64>> = (0..m_dims)
                .map(|j| {
                    if set.contains(j) {
                        self.p_table(x, b, j)
                    } else {
                        Mat::zeros(0, 0)
                    }
                })
                .collect();
            let theta_p = Self::hadamard_subset(&tables, set);
            let applied = Self::apply_transpose(theta_p.as_ref(), &beta_x, n);
            let sx2 = models[x].params.signal_variance;
            (0..n)
                .map(|p_i| {
                    let mut phi_ex = 1.0;
                    for j in 0..m_dims {
                        if !set.contains(j) {
                            phi_ex *= self.phi[b][j][p_i];
                        }
                    }
                    sx2 * sb2 * phi_ex * applied[p_i] - mu_x * self.h[b][p_i]
                })
                .collect()
        };
        let rl = side(a, m, mu_a);
        let rr = side(d, mp, mu_d);
        let rhs = Mat::from_fn(n, 1, |i, _| rr[i]);
        let sol = self.surrogate.solve_gram(b, &rhs);
        let data: f64 = (0..n).map(|i| rl[i] * sol[(i, 0)]).sum();
        prior - data
    }

    /// Full covariance-of-variance-estimates tensor
    /// `W_{mm'}[a,b,c,d] = Cov(V̂_m[a,b], V̂_{m'}[c,d])` from the four-term
    /// pairing sum over `G` entries.
    ///
    /// Cost grows as L³ axis-table rebuilds; intended for small models,
    /// diagnostics and cross-checks against the brute-force reference.
    pub fn covariance_of_variances(&self, m: &AxisSet, mp: &AxisSet) -> Result<Tensor4> {
        self.check_subset(m)?;
        self.check_subset(mp)?;
        let l_outs = self.surrogate.output_count();
        let mut w = Tensor4::zeros([l_outs; 4]);
        if m.is_empty() && mp.is_empty() {
            return Ok(w); // Every term carries a centralized mean: W_∅∅ = 0.
        }
        let mut g_cache: std::collections::HashMap<(usize, usize, usize), f64> =
            std::collections::HashMap::new();
        let g = |a: usize, b: usize, d: usize, cache: &mut std::collections::HashMap<(usize, usize, usize), f64>| {
            *cache
                .entry((a, b, d))
                .or_insert_with(|| self.g_value(m, mp, a, b, d))
        };
        for a in 0..l_outs {
            for b in 0..l_outs {
                for c in 0..l_outs {
                    for d in 0..l_outs {
                        let mut acc = 0.0;
                        if b == c {
                            acc += g(a, b, d, &mut g_cache);
                        }
                        if a == c {
                            acc += g(b, a, d, &mut g_cache);
                        }
                        if b == d {
                            acc += g(a, b, c, &mut g_cache);
                        }
                        if a == d {
                            acc += g(b, a, c, &mut g_cache);
                        }
                        w[[a, b, c, d]] = acc;
                    }
                }
            }
        }
        Ok(w)
    }
}
