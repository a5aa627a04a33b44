//! Deterministic test functions, their composite 9-output model, and the
//! output conditioning (standardization + seeded noise) used by the benchmark.
//!
//! Three classical sensitivity-analysis test functions are provided. Each maps
//! the unit cube to a scalar; the affine rescaling of the cube onto the
//! function's natural domain happens *inside* the operation, so the external
//! surface is always `[0, 1]^M`:
//!
//! - `ishigami(u; A, B) = (1 + B·x₂⁴)·sin x₀ + A·sin² x₁` with `x = 2πu − π`,
//! - `sobol_g(u; A, B) = Π_{m<5} ((1+B_m)·|2u_m − 1|^{B_m} + A_m) / (1 + A_m)`,
//! - `oakley(u; A, B) = x·A + x·B·x` with `x = 2u − 1` (a quadratic form).
//!
//! [`mnu9`] stacks nine parameterizations of these into one 5-input, 9-output
//! deterministic model whose closed Sobol' matrices for the prefix subsets
//! `(0..k)` are known to three decimals and embedded here as ground truth
//! ([`truth_closed_matrix`]).
//!
//! For surrogate fitting, outputs are standardized to zero mean and unit
//! (population) standard deviation per column, and optionally corrupted with
//! seeded Gaussian noise of relative magnitude `E`:
//!
//! ```text
//! y = (1 + E²)^{-1/2} · (f̄ + E·e),   e ~ iid N(0, 1)
//! ```
//!
//! which keeps the total variance of `y` at one while setting the
//! signal-to-noise ratio to `1/E`.

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use ndarray::Array2;

/// Number of outputs of [`mnu9`].
pub const MNU9_OUTPUTS: usize = 9;

/// Minimum number of input axes [`mnu9`] needs (extra axes are ignored).
pub const MNU9_MIN_INPUTS: usize = 5;

/// Steeply increasing damping coefficients `[3, 6, 9, 18, 27]` for
/// [`sobol_g`]: higher axes matter much less.
pub const COEFF_A_STEEP: [f64; 5] = [3.0, 6.0, 9.0, 18.0, 27.0];

/// Gently increasing damping coefficients `[1/2, 1, 2, 4, 8]` for
/// [`sobol_g`].
pub const COEFF_A_GENTLE: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

/// Linear coefficients `[5, 35/8, 15/4, 25/8, 5/2]` for [`oakley`].
pub const COEFF_A_LINEAR: [f64; 5] = [5.0, 35.0 / 8.0, 15.0 / 4.0, 25.0 / 8.0, 5.0 / 2.0];

/// Quadratic coefficient matrix for [`oakley`], stored as exact rationals;
/// entries decrease from `5` at the top-left corner to `1` at the bottom-right.
pub const COEFF_B_PLUS: [[f64; 5]; 5] = [
    [5.0, 29.0 / 6.0, 14.0 / 3.0, 9.0 / 2.0, 13.0 / 3.0],
    [25.0 / 6.0, 4.0, 23.0 / 6.0, 11.0 / 3.0, 7.0 / 2.0],
    [10.0 / 3.0, 19.0 / 6.0, 3.0, 17.0 / 6.0, 8.0 / 3.0],
    [5.0 / 2.0, 7.0 / 3.0, 13.0 / 6.0, 2.0, 11.0 / 6.0],
    [5.0 / 3.0, 3.0 / 2.0, 4.0 / 3.0, 7.0 / 6.0, 1.0],
];

/// The index-reversed companion of [`COEFF_B_PLUS`]:
/// `B₋[m, m'] = B₊[4-m, 4-m']`, so its entries instead *increase* down the
/// diagonal. Derived by reversal rather than stored, to avoid transcription
/// slips.
pub fn coeff_b_minus() -> [[f64; 5]; 5] {
    let mut b = [[0.0; 5]; 5];
    for (m, row) in b.iter_mut().enumerate() {
        for (mp, entry) in row.iter_mut().enumerate() {
            *entry = COEFF_B_PLUS[4 - m][4 - mp];
        }
    }
    b
}

/// Parameters of the [`ishigami`] function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IshigamiParams {
    /// Weight of the `sin²` term on axis 1.
    pub a: f64,
    /// Weight of the quartic interaction between axes 0 and 2.
    pub b: f64,
}

/// Parameters of the [`sobol_g`] function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SobolGParams {
    /// Per-axis damping; larger `a[m]` makes axis `m` less relevant.
    pub a: [f64; 5],
    /// Per-axis exponents on `|2u − 1|`.
    pub b: [f64; 5],
}

impl SobolGParams {
    /// Validates `a ≥ 0` elementwise (the denominators `1 + a` must stay
    /// positive) and that all entries are finite.
    pub fn new(a: [f64; 5], b: [f64; 5]) -> Result<Self> {
        for (m, &am) in a.iter().enumerate() {
            if !am.is_finite() || am < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "damping coefficient a[{m}] = {am} must be finite and non-negative"
                )));
            }
        }
        if b.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite exponent".into()));
        }
        Ok(Self { a, b })
    }

    /// Constant exponent `b` on every axis.
    pub fn with_uniform_exponent(a: [f64; 5], b: f64) -> Result<Self> {
        Self::new(a, [b; 5])
    }
}

/// Parameters of the [`oakley`] function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OakleyParams {
    /// Linear coefficients.
    pub a: [f64; 5],
    /// Quadratic form coefficients.
    pub b: [[f64; 5]; 5],
}

/// Noise magnitude and seed for [`add_noise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Noise-to-signal magnitude `E ≥ 0`.
    pub e: f64,
    /// Seed of the counter-based Gaussian stream.
    pub seed: u64,
}

impl NoiseSpec {
    /// Validates `E ≥ 0` and finite.
    pub fn new(e: f64, seed: u64) -> Result<Self> {
        if !e.is_finite() || e < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise magnitude {e} must be finite and non-negative"
            )));
        }
        Ok(Self { e, seed })
    }

    /// Derives a statistically independent sub-stream, e.g. one per fold, so
    /// parallel consumers stay reproducible regardless of schedule.
    pub fn substream(&self, stream: u64) -> Self {
        Self { e: self.e, seed: mix64(self.seed ^ mix64(stream.wrapping_add(0x9e3779b97f4a7c15))) }
    }
}

/// Rejects coordinates outside the closed unit interval.
fn check_unit_cube(u: &[f64]) -> Result<()> {
    for (axis, &x) in u.iter().enumerate() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Domain { axis, value: x });
        }
    }
    Ok(())
}

/// The Ishigami function on the unit cube (internally mapped to `[-π, π]³`).
pub fn ishigami(u: &[f64; 3], p: IshigamiParams) -> Result<f64> {
    check_unit_cube(u)?;
    let x: Vec<f64> = u.iter().map(|&v| 2.0 * std::f64::consts::PI * v - std::f64::consts::PI).collect();
    Ok((1.0 + p.b * x[2].powi(4)) * x[0].sin() + p.a * x[1].sin() * x[1].sin())
}

/// The (modified) Sobol' G function on the unit cube. Strictly positive.
pub fn sobol_g(u: &[f64; 5], p: &SobolGParams) -> Result<f64> {
    check_unit_cube(u)?;
    let mut prod = 1.0;
    for m in 0..5 {
        let t = (2.0 * u[m] - 1.0).abs();
        prod *= ((1.0 + p.b[m]) * t.powf(p.b[m]) + p.a[m]) / (1.0 + p.a[m]);
    }
    Ok(prod)
}

/// The restricted Oakley quadratic form on the unit cube (internally mapped to
/// `[-1, 1]⁵`): `x·A + x·B·x`.
pub fn oakley(u: &[f64; 5], p: &OakleyParams) -> Result<f64> {
    check_unit_cube(u)?;
    let mut x = [0.0; 5];
    for (xi, &ui) in x.iter_mut().zip(u) {
        *xi = 2.0 * ui - 1.0;
    }
    let linear: f64 = (0..5).map(|m| x[m] * p.a[m]).sum();
    let mut quad = 0.0;
    for m in 0..5 {
        for mp in 0..5 {
            quad += x[m] * p.b[m][mp] * x[mp];
        }
    }
    Ok(linear + quad)
}

/// The 9-output composite test model.
///
/// Reads only axes `0..5` of `u` — additional input dimensions never change
/// the outputs (or therefore the true Sobol' matrices), which is exactly what
/// makes them useful for benchmarking irrelevant-input detection. Outputs, in
/// order: three Ishigami variants, three Sobol' G variants, and three Oakley
/// quadratic forms.
pub fn mnu9(u: &[f64]) -> Result<[f64; MNU9_OUTPUTS]> {
    if u.len() < MNU9_MIN_INPUTS {
        return Err(Error::InvalidArgument(format!(
            "the 9-output test model needs at least {MNU9_MIN_INPUTS} input axes, got {}",
            u.len()
        )));
    }
    check_unit_cube(u)?;
    let u3: &[f64; 3] = u[..3].try_into().expect("length checked");
    let u5: &[f64; 5] = u[..5].try_into().expect("length checked");
    let neg_a_linear = COEFF_A_LINEAR.map(|a| -a);
    let g_steep = SobolGParams::with_uniform_exponent(COEFF_A_STEEP, 2.0)?;
    let g_gentle2 = SobolGParams::with_uniform_exponent(COEFF_A_GENTLE, 2.0)?;
    let g_gentle4 = SobolGParams::with_uniform_exponent(COEFF_A_GENTLE, 4.0)?;
    Ok([
        ishigami(u3, IshigamiParams { a: 7.0, b: 0.1 })?,
        ishigami(u3, IshigamiParams { a: 20.0, b: 1.0 })?,
        ishigami(u3, IshigamiParams { a: 0.0, b: 0.0 })?,
        sobol_g(u5, &g_steep)?,
        sobol_g(u5, &g_gentle2)?,
        sobol_g(u5, &g_gentle4)?,
        oakley(u5, &OakleyParams { a: COEFF_A_LINEAR, b: [[0.0; 5]; 5] })?,
        oakley(u5, &OakleyParams { a: COEFF_A_LINEAR, b: COEFF_B_PLUS })?,
        oakley(u5, &OakleyParams { a: neg_a_linear, b: coeff_b_minus() })?,
    ])
}

/// Standardizes each output column to mean 0 and population standard
/// deviation 1.
///
/// Returns the standardized `N×L` array together with the per-output means and
/// standard deviations that were removed, so results can be mapped back to the
/// original scale.
pub fn standardize(outputs: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>, Vec<f64>)> {
    let (n, l) = outputs.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "standardization needs at least 2 samples, got {n}"
        )));
    }
    let mut means = vec![0.0; l];
    let mut sds = vec![0.0; l];
    let mut out = outputs.clone();
    for j in 0..l {
        let col = outputs.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        if var <= 0.0 || !var.is_finite() {
            return Err(Error::ZeroVariance { output: j });
        }
        let sd = var.sqrt();
        means[j] = mean;
        sds[j] = sd;
        for i in 0..n {
            out[(i, j)] = (outputs[(i, j)] - mean) / sd;
        }
    }
    Ok((out, means, sds))
}

/// SplitMix64 finalizer: the avalanche permutation behind the counter RNG.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Uniform draw in `(0, 1)` addressed purely by `(seed, a, b, c)`.
fn counter_uniform(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    let z = mix64(seed ^ mix64(a ^ mix64(b ^ mix64(c))));
    // Top 53 bits, offset by half an ulp so the draw is never exactly 0.
    ((z >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// One standard-normal draw addressed by `(seed, output, sample)`.
///
/// Counter-based (Box–Muller over two counter uniforms), so any element of the
/// noise field can be generated independently and in any order — parallel
/// schedules cannot change the values.
pub(crate) fn counter_normal(seed: u64, output: u64, sample: u64) -> f64 {
    let u1 = counter_uniform(seed, output, sample, 0);
    let u2 = counter_uniform(seed, output, sample, 1);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Applies the noise model `y = (1 + E²)^{-1/2}·(f̄ + E·e)` to standardized
/// outputs.
///
/// `E = 0` returns the input bit-for-bit unchanged. Each matrix element's
/// noise is addressed by `(spec.seed, output, sample)`, so two calls with the
/// same spec agree exactly no matter how the work is scheduled.
pub fn add_noise(standardized: &Array2<f64>, spec: &NoiseSpec) -> Array2<f64> {
    if spec.e == 0.0 {
        return standardized.clone();
    }
    let (n, l) = standardized.dim();
    let scale = 1.0 / (1.0 + spec.e * spec.e).sqrt();
    let mut out = standardized.clone();
    for j in 0..l {
        for i in 0..n {
            let e = counter_normal(spec.seed, j as u64, i as u64);
            out[(i, j)] = scale * (standardized[(i, j)] + spec.e * e);
        }
    }
    out
}

/// The known closed Sobol' matrix of [`mnu9`] for the prefix subset
/// `(0..subset_len)`, to the three decimals it is published at.
///
/// `subset_len ≥ 5` returns the full-model correlation matrix (extra axes do
/// not affect the model). `subset_len = 0` returns the zero matrix (a void
/// model explains nothing).
pub fn truth_closed_matrix(subset_len: usize) -> Matrix {
    let table: &[[f64; 9]; 9] = match subset_len {
        0 => return Matrix::zeros(MNU9_OUTPUTS, MNU9_OUTPUTS),
        1 => &TRUTH_S1,
        2 => &TRUTH_S2,
        3 => &TRUTH_S3,
        4 => &TRUTH_S4,
        _ => &TRUTH_S5,
    };
    Matrix::from_fn(MNU9_OUTPUTS, MNU9_OUTPUTS, |i, j| table[i][j])
}

const TRUTH_S5: [[f64; 9]; 9] = [
    [1.000, 0.896, 0.560, -0.073, -0.078, -0.131, 0.254, 0.125, -0.159],
    [0.896, 1.000, 0.593, -0.032, -0.034, -0.057, 0.268, 0.146, -0.161],
    [0.560, 0.593, 1.000, 0.000, 0.000, 0.000, 0.453, 0.264, -0.264],
    [-0.073, -0.032, 0.000, 1.000, 0.944, 0.825, 0.000, 0.251, 0.136],
    [-0.078, -0.034, 0.000, 0.944, 1.000, 0.926, 0.000, 0.232, 0.137],
    [-0.131, -0.057, 0.000, 0.825, 0.926, 1.000, 0.000, 0.197, 0.116],
    [0.254, 0.268, 0.453, 0.000, 0.000, 0.000, 1.000, 0.582, -0.582],
    [0.125, 0.146, 0.264, 0.251, 0.232, 0.197, 0.582, 1.000, 0.206],
    [-0.159, -0.161, -0.264, 0.136, 0.137, 0.116, -0.582, 0.206, 1.000],
];

const TRUTH_S4: [[f64; 9]; 9] = [
    [1.000, 0.896, 0.560, -0.073, -0.078, -0.131, 0.254, 0.125, -0.159],
    [0.896, 1.000, 0.593, -0.032, -0.034, -0.057, 0.268, 0.146, -0.161],
    [0.560, 0.593, 1.000, 0.000, 0.000, 0.000, 0.453, 0.264, -0.264],
    [-0.073, -0.032, 0.000, 0.986, 0.929, 0.811, 0.000, 0.247, 0.116],
    [-0.078, -0.034, 0.000, 0.929, 0.979, 0.904, 0.000, 0.229, 0.118],
    [-0.131, -0.057, 0.000, 0.811, 0.904, 0.970, 0.000, 0.194, 0.100],
    [0.254, 0.268, 0.453, 0.000, 0.000, 0.000, 0.916, 0.533, -0.533],
    [0.125, 0.146, 0.264, 0.247, 0.229, 0.194, 0.533, 0.839, 0.031],
    [-0.159, -0.161, -0.264, 0.116, 0.118, 0.100, -0.533, 0.031, 0.591],
];

const TRUTH_S3: [[f64; 9]; 9] = [
    [1.000, 0.896, 0.560, -0.073, -0.078, -0.131, 0.254, 0.125, -0.159],
    [0.896, 1.000, 0.593, -0.032, -0.034, -0.057, 0.268, 0.146, -0.161],
    [0.560, 0.593, 1.000, 0.000, 0.000, 0.000, 0.453, 0.264, -0.264],
    [-0.073, -0.032, 0.000, 0.956, 0.889, 0.774, 0.000, 0.235, 0.093],
    [-0.078, -0.034, 0.000, 0.889, 0.912, 0.833, 0.000, 0.215, 0.091],
    [-0.131, -0.057, 0.000, 0.774, 0.833, 0.877, 0.000, 0.183, 0.077],
    [0.254, 0.268, 0.453, 0.000, 0.000, 0.000, 0.784, 0.457, -0.457],
    [0.125, 0.146, 0.264, 0.235, 0.215, 0.183, 0.457, 0.622, -0.096],
    [-0.159, -0.161, -0.264, 0.093, 0.091, 0.077, -0.457, -0.096, 0.359],
];

const TRUTH_S2: [[f64; 9]; 9] = [
    [0.756, 0.525, 0.560, -0.073, -0.078, -0.131, 0.254, 0.125, -0.159],
    [0.525, 0.435, 0.593, -0.032, -0.034, -0.057, 0.268, 0.146, -0.161],
    [0.560, 0.593, 1.000, 0.000, 0.000, 0.000, 0.453, 0.264, -0.264],
    [-0.073, -0.032, 0.000, 0.848, 0.765, 0.661, 0.000, 0.202, 0.059],
    [-0.078, -0.034, 0.000, 0.765, 0.741, 0.660, 0.000, 0.181, 0.057],
    [-0.131, -0.057, 0.000, 0.661, 0.660, 0.664, 0.000, 0.154, 0.048],
    [0.254, 0.268, 0.453, 0.000, 0.000, 0.000, 0.595, 0.346, -0.346],
    [0.125, 0.146, 0.264, 0.202, 0.181, 0.154, 0.346, 0.375, -0.145],
    [-0.159, -0.161, -0.264, 0.059, 0.057, 0.048, -0.346, -0.145, 0.221],
];

const TRUTH_S1: [[f64; 9]; 9] = [
    [0.314, 0.332, 0.560, 0.000, 0.000, 0.000, 0.254, 0.148, -0.148],
    [0.332, 0.351, 0.593, 0.000, 0.000, 0.000, 0.268, 0.156, -0.156],
    [0.560, 0.593, 1.000, 0.000, 0.000, 0.000, 0.453, 0.264, -0.264],
    [0.000, 0.000, 0.000, 0.632, 0.515, 0.438, 0.000, 0.139, 0.028],
    [0.000, 0.000, 0.000, 0.515, 0.420, 0.357, 0.000, 0.113, 0.023],
    [0.000, 0.000, 0.000, 0.438, 0.357, 0.331, 0.000, 0.096, 0.019],
    [0.254, 0.268, 0.453, 0.000, 0.000, 0.000, 0.337, 0.196, -0.196],
    [0.148, 0.156, 0.264, 0.139, 0.113, 0.096, 0.196, 0.145, -0.108],
    [-0.148, -0.156, -0.264, 0.028, 0.023, 0.019, -0.196, -0.108, 0.115],
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmc::SobolSequence;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ishigami_spot_values() {
        let p = IshigamiParams { a: 7.0, b: 0.1 };
        assert_abs_diff_eq!(ishigami(&[0.5, 0.5, 0.5], p).unwrap(), 0.0, epsilon = 1e-12);
        // x = (π/2, π/2, 0): 1·sin(π/2) + 7·sin²(π/2) = 8.
        assert_abs_diff_eq!(ishigami(&[0.75, 0.75, 0.5], p).unwrap(), 8.0, epsilon = 1e-12);
    }

    #[test]
    fn domain_violations_are_reported() {
        let p = IshigamiParams { a: 7.0, b: 0.1 };
        assert_eq!(
            ishigami(&[0.5, 1.5, 0.5], p),
            Err(Error::Domain { axis: 1, value: 1.5 })
        );
        let g = SobolGParams::with_uniform_exponent(COEFF_A_STEEP, 2.0).unwrap();
        assert!(sobol_g(&[0.0, 0.0, 0.0, 0.0, -0.1], &g).is_err());
    }

    #[test]
    fn sobol_g_center_and_corner() {
        let g = SobolGParams::with_uniform_exponent(COEFF_A_STEEP, 2.0).unwrap();
        // At the center |2u−1| = 0, so each factor is A/(1+A).
        let center: f64 = [3.0f64, 6.0, 9.0, 18.0, 27.0].iter().map(|a| a / (1.0 + a)).product();
        assert_abs_diff_eq!(sobol_g(&[0.5; 5], &g).unwrap(), center, epsilon = 1e-12);
        assert_abs_diff_eq!(center, 0.528545, epsilon = 1e-6);
        // At a corner |2u−1| = 1, so each factor is (3+A)/(1+A).
        let corner: f64 = [3.0f64, 6.0, 9.0, 18.0, 27.0].iter().map(|a| (3.0 + a) / (1.0 + a)).product();
        assert_abs_diff_eq!(sobol_g(&[1.0; 5], &g).unwrap(), corner, epsilon = 1e-12);
        assert_abs_diff_eq!(corner, 2.7406, epsilon = 1e-4);
    }

    #[test]
    fn oakley_spot_values() {
        let zero_b = OakleyParams { a: COEFF_A_LINEAR, b: [[0.0; 5]; 5] };
        assert_abs_diff_eq!(oakley(&[0.5; 5], &zero_b).unwrap(), 0.0, epsilon = 1e-12);
        // x = 1 vector: sum of the linear coefficients = 18.75.
        assert_abs_diff_eq!(oakley(&[1.0; 5], &zero_b).unwrap(), 18.75, epsilon = 1e-12);
        let mut eye = [[0.0; 5]; 5];
        for (m, row) in eye.iter_mut().enumerate() {
            row[m] = 1.0;
        }
        let pure_quad = OakleyParams { a: [0.0; 5], b: eye };
        assert_abs_diff_eq!(oakley(&[1.0; 5], &pure_quad).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn mnu9_center_point() {
        let y = mnu9(&[0.5; 5]).unwrap();
        for l in [0, 1, 2, 6] {
            assert_abs_diff_eq!(y[l], 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(y[3], 0.528545, epsilon = 1e-6);
    }

    #[test]
    fn mnu9_ignores_extra_axes_and_rejects_short_input() {
        let five = mnu9(&[0.3, 0.7, 0.1, 0.9, 0.4]).unwrap();
        let seven = mnu9(&[0.3, 0.7, 0.1, 0.9, 0.4, 0.99, 0.01]).unwrap();
        assert_eq!(five, seven);
        assert!(mnu9(&[0.5; 4]).is_err());
    }

    proptest! {
        /// Even-function reflection symmetry of the Sobol' G outputs and odd
        /// (sign-flipping) symmetry of the pure-sine and linear outputs.
        #[test]
        fn mnu9_reflection_symmetries(u in proptest::collection::vec(0.0f64..=1.0, 5)) {
            let reflected: Vec<f64> = u.iter().map(|&x| 1.0 - x).collect();
            let y = mnu9(&u).unwrap();
            let yr = mnu9(&reflected).unwrap();
            for l in [3, 4, 5] {
                prop_assert!((y[l] - yr[l]).abs() < 1e-10);
            }
            for l in [2, 6] {
                prop_assert!((y[l] + yr[l]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn standardize_basic_and_idempotent() {
        let x = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let (z, means, sds) = standardize(&x).unwrap();
        assert_abs_diff_eq!(means[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sds[0], (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        let mean: f64 = z.column(0).sum() / 3.0;
        let var: f64 = z.column(0).iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-14);
        let (z2, _, _) = standardize(&z).unwrap();
        for (a, b) in z.iter().zip(z2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let x = Array2::from_shape_vec((3, 2), vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        assert_eq!(standardize(&x), Err(Error::ZeroVariance { output: 1 }));
    }

    #[test]
    fn noise_is_deterministic_and_zero_noise_is_identity() {
        let x = Array2::from_shape_fn((16, 2), |(i, j)| (i as f64 - 7.5) / 4.0 + j as f64);
        let spec = NoiseSpec::new(0.3, 42).unwrap();
        let a = add_noise(&x, &spec);
        let b = add_noise(&x, &spec);
        assert_eq!(a, b);
        let clean = add_noise(&x, &NoiseSpec::new(0.0, 42).unwrap());
        assert_eq!(clean, x);
        let other = add_noise(&x, &NoiseSpec::new(0.3, 43).unwrap());
        assert_ne!(a, other);
    }

    #[test]
    fn unit_noise_preserves_total_variance() {
        // With E = 1 the signal and noise each carry half the variance, and
        // the (1+E²)^{-1/2} scaling keeps the total at 1.
        let n = 100_000;
        let raw = Array2::from_shape_fn((n, 1), |(i, _)| counter_normal(999, 7, i as u64));
        let (z, _, _) = standardize(&raw).unwrap();
        let noisy = add_noise(&z, &NoiseSpec::new(1.0, 5).unwrap());
        let mean: f64 = noisy.column(0).sum() / n as f64;
        let var: f64 = noisy.column(0).iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.02, "var = {var}");
    }

    #[test]
    fn truth_tables_are_symmetric_with_expected_spots() {
        for k in 1..=5 {
            let s = truth_closed_matrix(k);
            assert!(s.is_symmetric(1e-12), "table {k} asymmetric");
        }
        let s5 = truth_closed_matrix(5);
        for l in 0..MNU9_OUTPUTS {
            assert_eq!(s5[(l, l)], 1.000);
        }
        assert_eq!(s5[(0, 1)], 0.896);
        assert_eq!(s5[(0, 2)], 0.560);
        assert_eq!(truth_closed_matrix(4)[(8, 8)], 0.591);
        assert_eq!(truth_closed_matrix(1)[(0, 0)], 0.314);
        assert_eq!(truth_closed_matrix(7)[(3, 4)], 0.944);
        assert_eq!(truth_closed_matrix(0).max_abs(), 0.0);
    }

    #[test]
    fn empirical_correlation_matches_full_model_truth_table() {
        // Correlation matrix over 2^16 scrambled-QMC points vs the embedded
        // full-model table, elementwise within ±0.01; also checks the
        // odd/even symmetry argument that pins specific entries at zero.
        let n = 1u32 << 16;
        let seq = SobolSequence::new(5, 12345);
        let mut sum = [0.0; MNU9_OUTPUTS];
        let mut cross = [[0.0; MNU9_OUTPUTS]; MNU9_OUTPUTS];
        let mut point = [0.0; 5];
        for i in 0..n {
            seq.fill_point(i, &mut point);
            let y = mnu9(&point).unwrap();
            for l in 0..MNU9_OUTPUTS {
                sum[l] += y[l];
                for lp in l..MNU9_OUTPUTS {
                    cross[l][lp] += y[l] * y[lp];
                }
            }
        }
        let nf = f64::from(n);
        let mut corr = Matrix::zeros(MNU9_OUTPUTS, MNU9_OUTPUTS);
        for l in 0..MNU9_OUTPUTS {
            for lp in l..MNU9_OUTPUTS {
                let cov = cross[l][lp] / nf - sum[l] / nf * (sum[lp] / nf);
                corr[(l, lp)] = cov;
                corr[(lp, l)] = cov;
            }
        }
        let d: Vec<f64> = (0..MNU9_OUTPUTS).map(|l| corr[(l, l)].sqrt()).collect();
        let s5 = truth_closed_matrix(5);
        for l in 0..MNU9_OUTPUTS {
            for lp in 0..MNU9_OUTPUTS {
                let r = corr[(l, lp)] / (d[l] * d[lp]);
                assert!(
                    (r - s5[(l, lp)]).abs() < 0.01,
                    "corr[{l},{lp}] = {r}, table = {}",
                    s5[(l, lp)]
                );
            }
        }
        // Odd × even output pairs decorrelate by symmetry.
        for l in [2, 6] {
            for lp in [3, 4, 5] {
                let r = corr[(l, lp)] / (d[l] * d[lp]);
                assert!(r.abs() < 0.01, "({l},{lp}) correlation {r} should vanish");
            }
        }
    }
}
