//! Space-filling experimental designs and the design-matrix container.
//!
//! The sampling strategy is deliberately plain: a *jittered* Latin hypercube
//! places exactly one point uniformly at random inside each of the `N`
//! equal-width strata per axis, with the strata matched across axes by
//! independent random permutations. Jittering (rather than centering the
//! points in their strata) keeps the design an unbiased draw from the uniform
//! distribution, so estimator variability across seeds remains representative
//! — centered designs would understate it.
//!
//! Designs live on the unit cube. To study models with other continuous input
//! marginals, push the columns through [`quantile_transform`] with the inverse
//! CDF of choice; uniformity on `[0, 1]` is universal in that sense.

use crate::error::{Error, Result};
use crate::tensor::fmt_g17;
use crate::testfuncs::NoiseSpec;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Provenance tags carried by a [`DesignMatrix`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignMeta {
    /// Seed that produced the design (and, for benchmark cells, the split).
    pub seed: u64,
    /// Fold id within a cross-validation split; 0 for unsplit designs.
    pub fold: u32,
    /// Noise model applied to the outputs (`e = 0` for clean data).
    pub noise: NoiseSpec,
}

impl DesignMeta {
    /// Meta for a freshly generated, clean, unsplit design.
    pub fn unsplit(seed: u64) -> Self {
        Self { seed, fold: 0, noise: NoiseSpec { e: 0.0, seed } }
    }
}

/// `N×M` inputs on the unit cube paired with `N×L` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    inputs: Array2<f64>,
    outputs: Array2<f64>,
    /// Seed, fold and noise bookkeeping.
    pub meta: DesignMeta,
}

impl DesignMatrix {
    /// Validates row-count agreement and the unit-cube constraint.
    pub fn new(inputs: Array2<f64>, outputs: Array2<f64>, meta: DesignMeta) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidArgument("design needs at least one row".into()));
        }
        if inputs.nrows() != outputs.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} output rows", inputs.nrows()),
                got: format!("{}", outputs.nrows()),
            });
        }
        for row in inputs.rows() {
            for (axis, &x) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Domain { axis, value: x });
                }
            }
        }
        Ok(Self { inputs, outputs, meta })
    }

    /// Number of sample rows `N`.
    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    /// Number of input axes `M`.
    pub fn m(&self) -> usize {
        self.inputs.ncols()
    }

    /// Number of outputs `L`.
    pub fn l(&self) -> usize {
        self.outputs.ncols()
    }

    /// The `N×M` input block.
    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    /// The `N×L` output block.
    pub fn outputs(&self) -> &Array2<f64> {
        &self.outputs
    }

    /// Replaces the outputs (e.g. after standardization or noise injection).
    pub fn with_outputs(&self, outputs: Array2<f64>, noise: NoiseSpec) -> Result<Self> {
        let mut meta = self.meta;
        meta.noise = noise;
        Self::new(self.inputs.clone(), outputs, meta)
    }

    /// Serializes as a single CSV with header `u0,…,u{M-1},y0,…,y{L-1}` and
    /// 17-significant-digit values.
    pub fn to_csv(&self) -> String {
        let (m, l) = (self.m(), self.l());
        let mut out = String::new();
        for j in 0..m {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("u{j}"));
        }
        for j in 0..l {
            out.push(',');
            out.push_str(&format!("y{j}"));
        }
        out.push('\n');
        for i in 0..self.n() {
            for j in 0..m {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&fmt_g17(self.inputs[(i, j)]));
            }
            for j in 0..l {
                out.push(',');
                out.push_str(&fmt_g17(self.outputs[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the format written by [`Self::to_csv`]. The header determines
    /// the input/output split; meta defaults to seed 0 (the CSV carries none).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty design CSV".into()))?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        let m = names.iter().take_while(|n| n.starts_with('u')).count();
        let l = names.len() - m;
        if m == 0 || l == 0 || !names[m..].iter().all(|n| n.starts_with('y')) {
            return Err(Error::InvalidArgument(
                "design CSV header must name u… input columns then y… output columns".into(),
            ));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        let mut n = 0;
        for (lineno, line) in lines.enumerate() {
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            let row = row.map_err(|_| {
                Error::InvalidArgument(format!("unparseable design CSV row {}", lineno + 2))
            })?;
            if row.len() != m + l {
                return Err(Error::InvalidArgument(format!(
                    "design CSV row {} has {} fields, expected {}",
                    lineno + 2,
                    row.len(),
                    m + l
                )));
            }
            inputs.extend_from_slice(&row[..m]);
            outputs.extend_from_slice(&row[m..]);
            n += 1;
        }
        let inputs = Array2::from_shape_vec((n, m), inputs).expect("counted shape");
        let outputs = Array2::from_shape_vec((n, l), outputs).expect("counted shape");
        Self::new(inputs, outputs, DesignMeta::unsplit(0))
    }
}

/// Generates an `n × m` jittered Latin hypercube.
///
/// Per axis, row `i` of the result lies in stratum `perm[i]` of `n` equal
/// strata, uniformly jittered inside it; `perm` is an independent seeded
/// permutation per axis. Deterministic per `(n, m, seed)`.
pub fn latin_hypercube(n: usize, m: usize, seed: u64) -> Array2<f64> {
    assert!(n >= 1 && m >= 1, "design dimensions must be positive");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut design = Array2::zeros((n, m));
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..m {
        perm.sort_unstable();
        perm.shuffle(&mut rng);
        for i in 0..n {
            let jitter: f64 = rng.random();
            design[(i, j)] = (perm[i] as f64 + jitter) / n as f64;
        }
    }
    design
}

/// Randomly splits an even-row design into two disjoint folds of equal size.
///
/// The same partition serves both cross-validation folds — fold 0 trains on
/// the first half and tests on the second, fold 1 swaps the roles — so this
/// returns the halves tagged `fold = 0` and `fold = 1` and callers exchange
/// them as needed. Deterministic per seed.
pub fn split_two_fold(design: &DesignMatrix, seed: u64) -> Result<(DesignMatrix, DesignMatrix)> {
    let rows = design.n();
    if rows % 2 != 0 {
        return Err(Error::OddRowCount { rows });
    }
    let half = rows / 2;
    let mut order: Vec<usize> = (0..rows).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5bd1_e995_u64);
    order.shuffle(&mut rng);
    let pick = |rows_idx: &[usize], fold: u32| -> Result<DesignMatrix> {
        let inputs = Array2::from_shape_fn((rows_idx.len(), design.m()), |(i, j)| {
            design.inputs()[(rows_idx[i], j)]
        });
        let outputs = Array2::from_shape_fn((rows_idx.len(), design.l()), |(i, j)| {
            design.outputs()[(rows_idx[i], j)]
        });
        let mut meta = design.meta;
        meta.fold = fold;
        DesignMatrix::new(inputs, outputs, meta)
    };
    Ok((pick(&order[..half], 0)?, pick(&order[half..], 1)?))
}

/// Pushes uniform values through a monotone inverse CDF.
///
/// With the generalized inverse `P⁻¹(u) = inf{x | P(x) ≥ u}` of any continuous
/// marginal this turns a uniform design column into a sample of that marginal;
/// the identity map returns the input unchanged.
pub fn quantile_transform(u: &[f64], cdf_inverse: impl Fn(f64) -> f64) -> Vec<f64> {
    u.iter().map(|&x| cdf_inverse(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn four_point_hypercube_is_stratified() {
        let d = latin_hypercube(4, 1, 9);
        let mut col: Vec<f64> = d.column(0).to_vec();
        col.sort_by(f64::total_cmp);
        for (i, x) in col.iter().enumerate() {
            assert!(
                (i as f64 / 4.0..(i + 1) as f64 / 4.0).contains(x),
                "sorted sample {i} = {x} escapes its stratum"
            );
        }
    }

    #[test]
    fn hypercube_mean_is_centered() {
        let d = latin_hypercube(100, 5, 3);
        for j in 0..5 {
            let mean = d.column(j).sum() / 100.0;
            assert!((mean - 0.5).abs() < 0.03, "axis {j} mean {mean}");
        }
    }

    #[test]
    fn hypercube_is_deterministic() {
        assert_eq!(latin_hypercube(32, 4, 7), latin_hypercube(32, 4, 7));
        assert_ne!(latin_hypercube(32, 4, 7), latin_hypercube(32, 4, 8));
    }

    proptest! {
        /// Strict stratification: sorted per-axis samples satisfy
        /// floor(N·u_(i)) = i.
        #[test]
        fn stratification_holds(n in 1usize..40, m in 1usize..6, seed in 0u64..1000) {
            let d = latin_hypercube(n, m, seed);
            for j in 0..m {
                let mut col: Vec<f64> = d.column(j).to_vec();
                col.sort_by(f64::total_cmp);
                for (i, x) in col.iter().enumerate() {
                    prop_assert_eq!((x * n as f64).floor() as usize, i);
                }
            }
        }
    }

    fn toy_design(rows: usize) -> DesignMatrix {
        let inputs = latin_hypercube(rows, 2, 5);
        let outputs = Array2::from_shape_fn((rows, 1), |(i, _)| i as f64);
        DesignMatrix::new(inputs, outputs, DesignMeta::unsplit(5)).unwrap()
    }

    #[test]
    fn split_partitions_rows() {
        let d = toy_design(8);
        let (a, b) = split_two_fold(&d, 1).unwrap();
        assert_eq!(a.n(), 4);
        assert_eq!(b.n(), 4);
        assert_eq!(a.meta.fold, 0);
        assert_eq!(b.meta.fold, 1);
        // Outputs index the original rows, so the union of output values must
        // be exactly {0, …, 7} with no repeats.
        let mut seen: Vec<f64> = a.outputs().iter().chain(b.outputs().iter()).copied().collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..8).map(|i| i as f64).collect::<Vec<_>>());
        // Same seed → same split.
        let (a2, _) = split_two_fold(&d, 1).unwrap();
        assert_eq!(a.outputs(), a2.outputs());
    }

    #[test]
    fn split_rejects_odd_row_count() {
        let d = toy_design(7);
        assert_eq!(split_two_fold(&d, 1).unwrap_err(), Error::OddRowCount { rows: 7 });
    }

    #[test]
    fn quantile_transform_examples() {
        let u = [0.0, 0.25, 0.5, 1.0];
        assert_eq!(quantile_transform(&u, |x| x), u.to_vec());
        assert_eq!(quantile_transform(&u, |x| 2.0 * x - 1.0), vec![-1.0, -0.5, 0.0, 1.0]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let z = quantile_transform(&[0.5, 0.9772498680518208], |x| normal.inverse_cdf(x));
        assert!(z[0].abs() < 1e-12);
        assert!((z[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn design_csv_round_trips() {
        let d = toy_design(6);
        let text = d.to_csv();
        assert!(text.starts_with("u0,u1,y0\n"));
        let back = DesignMatrix::from_csv(&text).unwrap();
        assert_eq!(back.inputs(), d.inputs());
        assert_eq!(back.outputs(), d.outputs());
    }

    #[test]
    fn design_rejects_out_of_cube_inputs() {
        let inputs = Array2::from_shape_vec((1, 2), vec![0.5, 1.5]).unwrap();
        let outputs = Array2::zeros((1, 1));
        assert!(matches!(
            DesignMatrix::new(inputs, outputs, DesignMeta::unsplit(0)),
            Err(Error::Domain { axis: 1, .. })
        ));
    }
}
