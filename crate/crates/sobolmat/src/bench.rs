//! Benchmark harness: grid sweep over model size, sample count and noise.
//!
//! A benchmark *cell* is one `(M, N, E)` combination: `M` input axes (the
//! test model reads the first five, the rest are inert), `N` training points
//! per fold, and noise magnitude `E`. Each cell
//!
//! 1. draws a `2N`-point latin hypercube,
//! 2. evaluates the 9-output test model, standardizes per output and applies
//!    the noise model `y = (1 + E²)^{−1/2}(f̄ + E·e)`,
//! 3. splits into two folds; each fold trains a surrogate and is validated
//!    on the other half,
//! 4. computes Sobol' reports for a subset schedule, compares against ground
//!    truth, and applies the plausibility filter.
//!
//! Per element the cell records the absolute error `A = |S_est − S_true|`
//! and the standardized score `A/T` — how many predicted standard errors
//! the estimate missed by. Scores are only meaningful when the error theory
//! holds, so aggregation pools the unfiltered elements of each `(N, E)`
//! coordinate (over models, folds, subsets and matrix elements) into
//! nearest-rank medians and 90% quantiles, emitted as heat-map tables with
//! noise decreasing down the rows and sample count increasing along the
//! columns.
//!
//! Ground truth comes from the embedded reference tables where the subset
//! is (equivalent to) a prefix of the active axes, and otherwise from the
//! pick-freeze oracle on the noise-free test model, cached per active-axis
//! set. Numerical failures (unfactorizable fits, lengthscales below the
//! supported floor, negative error variances) flag the fold instead of
//! aborting the sweep.
//!
//! Everything is a pure function of `(grid, seed)`: cells are independent
//! work units, results are keyed and sorted before serialization, so the
//! emitted CSV is byte-identical regardless of worker count.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::axes::AxisSet;
use crate::error::{Error, Result};
use crate::gsa::{compute_reports, filter_reports, FILTER_WINDOW};
use crate::moments::{Backend, MomentEngine};
use crate::oracle::pick_freeze_closed_matrix;
use crate::qmc::MAX_SAMPLES;
use crate::sampling::{latin_hypercube, split_two_fold, DesignMatrix, DesignMeta};
use crate::surrogate::{fit, FitOptions};
use crate::tensor::Matrix;
use crate::testfuncs::{
    add_noise, mix64, mnu9, standardize, truth_closed_matrix, NoiseSpec, MNU9_MIN_INPUTS,
    MNU9_OUTPUTS,
};

/// Number of cross-validation folds per cell.
pub const FOLDS: u32 = 2;

/// Held-out rows used for the posterior-dispersion metric (keeps the
/// `O(N²·rows)` posterior evaluation bounded at large `N`).
const SD_PROBE_ROWS: usize = 128;

/// Replicated quasi-Monte-Carlo streams behind oracle ground truth
/// (`4 × 2¹⁶ = 2¹⁸` point pairs).
const TRUTH_REPLICATES: u32 = 4;

/// Fixed seed of the ground-truth oracle (truth must not vary with the
/// benchmark seed).
const TRUTH_SEED: u32 = 7;

/// Which subsets each cell evaluates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum SubsetSchedule {
    /// A named schedule; only `"default"` is recognized.
    Named(String),
    /// Explicit axis lists, applied to every model size in the grid.
    Explicit(Vec<Vec<usize>>),
}

impl SubsetSchedule {
    /// The default schedule: the nested prefix family `(0..k)` for
    /// `k = 1..=M` plus the single-axis removals `M − {j}`, deduplicated.
    pub fn default_schedule() -> Self {
        Self::Named("default".into())
    }

    /// Resolves the schedule for a concrete model size.
    pub fn for_dims(&self, m_dims: usize) -> Result<Vec<AxisSet>> {
        let mut subsets = Vec::new();
        match self {
            Self::Named(name) if name == "default" => {
                for k in 1..=m_dims {
                    subsets.push(AxisSet::new(0..k, m_dims)?);
                }
                for j in 0..m_dims {
                    let removal =
                        AxisSet::new((0..m_dims).filter(|&axis| axis != j), m_dims)?;
                    if !subsets.contains(&removal) {
                        subsets.push(removal);
                    }
                }
            }
            Self::Named(name) => {
                return Err(Error::InvalidArgument(format!(
                    "unknown subset schedule {name:?}; use \"default\" or explicit lists"
                )));
            }
            Self::Explicit(lists) => {
                for axes in lists {
                    let subset = AxisSet::new(axes.clone(), m_dims)?;
                    if !subsets.contains(&subset) {
                        subsets.push(subset);
                    }
                }
                if subsets.is_empty() {
                    return Err(Error::InvalidArgument(
                        "explicit subset schedule is empty".into(),
                    ));
                }
            }
        }
        Ok(subsets)
    }
}

/// The benchmark sweep definition (serializable as `grid.json`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchmarkGrid {
    /// Model sizes (input axis counts), each at least the 5 the test model
    /// reads.
    #[serde(rename = "M")]
    pub m_list: Vec<usize>,
    /// Training-set sizes per fold.
    #[serde(rename = "N")]
    pub n_list: Vec<usize>,
    /// Noise magnitudes.
    #[serde(rename = "E")]
    pub e_list: Vec<f64>,
    /// Master seed; the whole sweep is a pure function of `(grid, seed)`.
    pub seed: u64,
    /// Subset schedule per cell.
    #[serde(default = "SubsetSchedule::default_schedule")]
    pub subsets: SubsetSchedule,
}

impl BenchmarkGrid {
    /// The desk-scale default grid: both model sizes, six sample counts and
    /// five noise magnitudes spanning every qualitative regime from
    /// noise-dominated to near-exact.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            m_list: vec![5, 7],
            n_list: vec![30, 90, 210, 512, 1024, 2048],
            e_list: vec![0.0025, 0.1, 0.5, 1.0, 10.0_f64.sqrt()],
            seed,
            subsets: SubsetSchedule::default_schedule(),
        }
    }

    /// Checks the grid invariants.
    pub fn validate(&self) -> Result<()> {
        if self.m_list.is_empty() || self.n_list.is_empty() || self.e_list.is_empty() {
            return Err(Error::InvalidArgument(
                "benchmark grid lists must be non-empty".into(),
            ));
        }
        for &m in &self.m_list {
            if m < MNU9_MIN_INPUTS {
                return Err(Error::InvalidArgument(format!(
                    "model size {m} below the {MNU9_MIN_INPUTS} axes the test model reads"
                )));
            }
            self.subsets.for_dims(m)?;
        }
        for &n in &self.n_list {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "fold size {n} must be at least 2"
                )));
            }
        }
        for &e in &self.e_list {
            if !e.is_finite() || e < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "noise magnitude {e} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// One `(subset, l, l')` comparison against ground truth.
#[derive(Debug, Clone)]
pub struct ElementRecord {
    /// Axis subset the matrices belong to.
    pub subset: AxisSet,
    /// Output row.
    pub l: usize,
    /// Output column.
    pub lp: usize,
    /// Estimated closed Sobol'-matrix element (pre-filter).
    pub s_est: f64,
    /// Ground-truth element.
    pub s_true: f64,
    /// Absolute error `|S_est − S_true|`.
    pub a: f64,
    /// Predicted standard error of the estimate.
    pub t: f64,
    /// Standardized score `A/T`; present only for unfiltered elements with
    /// `T > 0`.
    pub score: Option<f64>,
    /// Whether the plausibility filter removed this element.
    pub filtered: bool,
}

/// Results of one fold of one benchmark cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    /// Number of input axes.
    pub m_dims: usize,
    /// Training points in this fold.
    pub n: usize,
    /// Noise magnitude.
    pub e: f64,
    /// Fold id (0 or 1).
    pub fold: u32,
    /// Per-element comparisons; empty when the fold was flagged.
    pub rows: Vec<ElementRecord>,
    /// Per-output root-mean-square error of the surrogate mean on the
    /// held-out fold, in clean standardized units (predictions are rescaled
    /// by `sqrt(1 + E²)` to undo the noise normalization).
    pub rmse: Vec<f64>,
    /// Per-output mean posterior standard deviation on (a deterministic
    /// probe of) the held-out fold, rescaled like `rmse`.
    pub sd: Vec<f64>,
    /// Why the fold produced no Sobol' rows, when it didn't.
    pub flag: Option<String>,
}

/// A flattened metric observation used by [`aggregate`].
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    /// Training points of the originating cell.
    pub n: usize,
    /// Noise magnitude of the originating cell.
    pub e: f64,
    /// Absolute error of the element.
    pub a: f64,
    /// Standardized score, where defined.
    pub score: Option<f64>,
    /// Whether the filter removed the element (excluded from aggregates).
    pub filtered: bool,
}

impl CellResult {
    /// Flattens the element records into metric observations.
    pub fn observations(&self) -> impl Iterator<Item = Observation> + '_ {
        self.rows.iter().map(|row| Observation {
            n: self.n,
            e: self.e,
            a: row.a,
            score: row.score,
            filtered: row.filtered,
        })
    }
}

/// Ground-truth closed Sobol' matrices, cached per active-axis set.
///
/// The test model ignores axes ≥ 5, so a subset's truth depends only on its
/// intersection with the active axes. Prefix intersections are served from
/// the embedded reference tables; anything else runs the pick-freeze oracle
/// on the noise-free model once and caches the result.
pub struct TruthSource {
    cache: Mutex<HashMap<Vec<usize>, Matrix>>,
}

impl Default for TruthSource {
    fn default() -> Self {
        Self::new()
    }
}

impl TruthSource {
    /// An empty cache.
    pub fn new() -> Self {
        Self { cache: Mutex::new(HashMap::new()) }
    }

    /// Ground-truth closed Sobol' matrix for `m` (in any ambient dimension
    /// ≥ 5).
    pub fn closed_matrix(&self, m: &AxisSet) -> Result<Matrix> {
        let active: Vec<usize> = m
            .axes()
            .iter()
            .copied()
            .filter(|&axis| axis < MNU9_MIN_INPUTS)
            .collect();
        if active.iter().enumerate().all(|(i, &axis)| axis == i) {
            return Ok(truth_closed_matrix(active.len()));
        }
        if let Some(hit) = self.cache.lock().unwrap().get(&active) {
            return Ok(hit.clone());
        }
        let subset = AxisSet::new(active.clone(), MNU9_MIN_INPUTS)?;
        let estimate = pick_freeze_closed_matrix(
            |u, out| {
                out.copy_from_slice(&mnu9(u)?);
                Ok(())
            },
            MNU9_MIN_INPUTS,
            MNU9_OUTPUTS,
            &subset,
            MAX_SAMPLES,
            TRUTH_SEED,
            TRUTH_REPLICATES,
        )?;
        let mut cache = self.cache.lock().unwrap();
        Ok(cache.entry(active).or_insert(estimate.s).clone())
    }
}

/// Deterministic per-cell seed derived from the sweep seed and the cell
/// coordinates (independent of scheduling order).
fn cell_seed(master: u64, m_dims: usize, n: usize, e: f64) -> u64 {
    let mut acc = mix64(master ^ 0xb5ad_4ece_da1c_e2a9);
    acc = mix64(acc ^ m_dims as u64);
    acc = mix64(acc ^ n as u64);
    mix64(acc ^ e.to_bits())
}

/// Runs one benchmark cell: both folds of one `(M, N, E)` coordinate.
///
/// Numerical failures (unfactorizable Gram matrices, lengthscales below the
/// supported integration floor, negative error variances) flag the affected
/// fold and leave its `rows` empty; anything else propagates.
pub fn run_cell(
    m_dims: usize,
    n: usize,
    e: f64,
    master_seed: u64,
    schedule: &SubsetSchedule,
    truth: &TruthSource,
) -> Result<Vec<CellResult>> {
    if m_dims < MNU9_MIN_INPUTS {
        return Err(Error::InvalidArgument(format!(
            "cell model size {m_dims} below the {MNU9_MIN_INPUTS} axes the test model reads"
        )));
    }
    let subsets = schedule.for_dims(m_dims)?;
    let seed = cell_seed(master_seed, m_dims, n, e);

    // One design of 2N rows serves both folds.
    let inputs = latin_hypercube(2 * n, m_dims, seed);
    let mut raw = Array2::zeros((2 * n, MNU9_OUTPUTS));
    let mut row_buf = vec![0.0; m_dims];
    for i in 0..2 * n {
        for j in 0..m_dims {
            row_buf[j] = inputs[[i, j]];
        }
        let y = mnu9(&row_buf)?;
        for (l, &value) in y.iter().enumerate() {
            raw[[i, l]] = value;
        }
    }
    let (clean, _means, _sds) = standardize(&raw)?;
    let noise = NoiseSpec::new(e, mix64(seed ^ 0x9e3779b97f4a7c15))?;
    let noisy = add_noise(&clean, &noise);

    let noisy_design =
        DesignMatrix::new(inputs.clone(), noisy, DesignMeta { seed, fold: 0, noise })?;
    let clean_design = DesignMatrix::new(inputs, clean, DesignMeta::unsplit(seed))?;
    // Splitting both designs with the same seed applies the same row
    // permutation, keeping clean targets aligned with the noisy halves.
    let halves = split_two_fold(&noisy_design, seed)?;
    let clean_halves = split_two_fold(&clean_design, seed)?;

    let mut results = Vec::with_capacity(FOLDS as usize);
    for fold in 0..FOLDS {
        let (train, test, test_clean) = if fold == 0 {
            (&halves.0, &halves.1, &clean_halves.1)
        } else {
            (&halves.1, &halves.0, &clean_halves.0)
        };
        results.push(run_fold(
            m_dims, n, e, fold, seed, &subsets, truth, train, test, test_clean,
        )?);
    }
    Ok(results)
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    m_dims: usize,
    n: usize,
    e: f64,
    fold: u32,
    seed: u64,
    subsets: &[AxisSet],
    truth: &TruthSource,
    train: &DesignMatrix,
    test: &DesignMatrix,
    test_clean: &DesignMatrix,
) -> Result<CellResult> {
    let mut result = CellResult {
        m_dims,
        n,
        e,
        fold,
        rows: Vec::new(),
        rmse: Vec::new(),
        sd: Vec::new(),
        flag: None,
    };
    let options = FitOptions {
        seed: mix64(seed ^ u64::from(fold).wrapping_add(1)),
        ..FitOptions::default()
    };
    let surrogate = match fit(train, &options) {
        Ok(s) => s,
        Err(err) if err.is_numerical() => {
            result.flag = Some(format!("fit failed: {err}"));
            return Ok(result);
        }
        Err(err) => return Err(err),
    };

    // Held-out validation in clean standardized units: the noise model
    // shrank the signal by (1 + E²)^{−1/2}, so predictions are scaled back
    // up before comparison.
    let rescale = (1.0 + e * e).sqrt();
    let predicted = surrogate.predict_mean(test.inputs())?;
    let rows = test.n();
    for l in 0..MNU9_OUTPUTS {
        let mut sq = 0.0;
        for i in 0..rows {
            let residual = predicted[[i, l]] * rescale - test_clean.outputs()[[i, l]];
            sq += residual * residual;
        }
        result.rmse.push((sq / rows as f64).sqrt());
    }
    let probe_rows = rows.min(SD_PROBE_ROWS);
    let probe = Array2::from_shape_fn((probe_rows, m_dims), |(i, j)| test.inputs()[[i, j]]);
    let kernels = surrogate.posterior_kernel(&probe, &probe)?;
    for kernel in &kernels {
        let mean_sd = (0..probe_rows)
            .map(|i| kernel[(i, i)].max(0.0).sqrt())
            .sum::<f64>()
            / probe_rows as f64;
        result.sd.push(mean_sd * rescale);
    }

    let rows = (|| -> Result<Vec<ElementRecord>> {
        let engine = MomentEngine::new(&surrogate, Backend::ClosedForm, 0.0)?;
        let reports = compute_reports(&engine, subsets)?;
        let (filtered_reports, _events) = filter_reports(&reports, FILTER_WINDOW);
        let mut rows = Vec::with_capacity(subsets.len() * MNU9_OUTPUTS * MNU9_OUTPUTS);
        for (ri, report) in reports.iter().enumerate() {
            let s_true = truth.closed_matrix(&report.subset)?;
            for l in 0..MNU9_OUTPUTS {
                for lp in 0..MNU9_OUTPUTS {
                    let filtered = filtered_reports[ri].s[(l, lp)].is_nan();
                    let s_est = report.s[(l, lp)];
                    let t = report.t[(l, lp)];
                    let a = (s_est - s_true[(l, lp)]).abs();
                    let score = (!filtered && t > 0.0).then(|| a / t);
                    rows.push(ElementRecord {
                        subset: report.subset.clone(),
                        l,
                        lp,
                        s_est,
                        s_true: s_true[(l, lp)],
                        a,
                        t,
                        score,
                        filtered,
                    });
                }
            }
        }
        Ok(rows)
    })();
    match rows {
        Ok(rows) => result.rows = rows,
        Err(err) if err.is_numerical() => {
            result.flag = Some(format!("report failed: {err}"));
        }
        Err(err) => return Err(err),
    }
    Ok(result)
}

/// Runs the whole grid on a bounded worker pool and returns the fold
/// results sorted by `(M, N, E, fold)`.
///
/// Cells are independent; identical `(grid, seed)` produce identical
/// results for any `workers` count.
pub fn run_grid(grid: &BenchmarkGrid, workers: usize) -> Result<Vec<CellResult>> {
    grid.validate()?;
    let truth = TruthSource::new();
    let mut coords = Vec::new();
    for &m in &grid.m_list {
        for &n in &grid.n_list {
            for &e in &grid.e_list {
                coords.push((m, n, e));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|err| Error::InvalidArgument(format!("worker pool: {err}")))?;
    let nested: Result<Vec<Vec<CellResult>>> = pool.install(|| {
        coords
            .par_iter()
            .map(|&(m, n, e)| run_cell(m, n, e, grid.seed, &grid.subsets, &truth))
            .collect()
    });
    let mut cells: Vec<CellResult> = nested?.into_iter().flatten().collect();
    cells.sort_by_key(|c| (c.m_dims, c.n, c.e.to_bits(), c.fold));
    Ok(cells)
}

/// Nearest-rank quantile: the `⌈p·n⌉`-th smallest value (1-based), so the
/// median of three values is the second and the 90% quantile of ten sorted
/// values is the ninth.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Which per-element metric a heat map aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Absolute error `A`.
    AbsoluteError,
    /// Standardized score `A/T`.
    StandardizedScore,
}

/// One aggregated heat-map table.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTable {
    /// Column coordinates: sample counts, ascending.
    pub n_values: Vec<usize>,
    /// Row coordinates: noise magnitudes, ascending (equivalently
    /// `−log₁₀E` descending, the conventional heat-map orientation).
    pub e_values: Vec<f64>,
    /// `values[row][col]`; NaN marks a coordinate with no usable elements.
    pub values: Vec<Vec<f64>>,
}

impl HeatmapTable {
    /// Serializes with one header row of `N` values and one leading `E`
    /// column per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("E\\N");
        for &n in &self.n_values {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for (row, &e) in self.e_values.iter().enumerate() {
            let _ = write!(out, "{e:.16e}");
            for col in 0..self.n_values.len() {
                let _ = write!(out, ",{:.16e}", self.values[row][col]);
            }
            out.push('\n');
        }
        out
    }
}

/// Pools unfiltered observations per `(N, E)` coordinate into the
/// nearest-rank `p`-quantile of the chosen metric.
pub fn aggregate(observations: &[Observation], metric: Metric, p: f64) -> HeatmapTable {
    let mut n_values: Vec<usize> = observations.iter().map(|o| o.n).collect();
    n_values.sort_unstable();
    n_values.dedup();
    let mut e_bits: Vec<u64> = observations.iter().map(|o| o.e.to_bits()).collect();
    e_bits.sort_unstable();
    e_bits.dedup();
    let e_values: Vec<f64> = e_bits.iter().map(|&b| f64::from_bits(b)).collect();

    let values = e_values
        .iter()
        .map(|&e| {
            n_values
                .iter()
                .map(|&n| {
                    let mut pool: Vec<f64> = observations
                        .iter()
                        .filter(|o| o.n == n && o.e.to_bits() == e.to_bits() && !o.filtered)
                        .filter_map(|o| match metric {
                            Metric::AbsoluteError => o.a.is_finite().then_some(o.a),
                            Metric::StandardizedScore => {
                                o.score.filter(|s| s.is_finite())
                            }
                        })
                        .collect();
                    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    nearest_rank(&pool, p).unwrap_or(f64::NAN)
                })
                .collect()
        })
        .collect();
    HeatmapTable { n_values, e_values, values }
}

/// Formats an axis subset for CSV (`"0+2+4"`; `"-"` for the empty set).
fn subset_label(subset: &AxisSet) -> String {
    if subset.is_empty() {
        return "-".into();
    }
    subset
        .axes()
        .iter()
        .map(|axis| axis.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

/// Serializes fold results as `cells.csv`.
///
/// Columns: `M,N,E,fold,m,l,lprime,S_est,S_true,A,T,score,filtered`; the
/// score field is empty where the score is undefined.
pub fn cells_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("M,N,E,fold,m,l,lprime,S_est,S_true,A,T,score,filtered\n");
    for cell in cells {
        for row in &cell.rows {
            let _ = write!(
                out,
                "{},{},{:.16e},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},",
                cell.m_dims,
                cell.n,
                cell.e,
                cell.fold,
                subset_label(&row.subset),
                row.l,
                row.lp,
                row.s_est,
                row.s_true,
                row.a,
                row.t,
            );
            if let Some(score) = row.score {
                let _ = write!(out, "{score:.16e}");
            }
            let _ = writeln!(out, ",{}", row.filtered);
        }
    }
    out
}

/// Parses a `cells.csv` produced by [`cells_csv`] back into observations
/// (for re-aggregating an existing sweep).
pub fn parse_cells_csv(text: &str) -> Result<Vec<Observation>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("M,N,E,fold,m,l,lprime") {
        return Err(Error::InvalidArgument(format!(
            "unrecognized cells.csv header {header:?}"
        )));
    }
    let mut observations = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::InvalidArgument(format!(
                "cells.csv line {}: expected 13 fields, got {}",
                idx + 2,
                fields.len()
            )));
        }
        let parse = |field: &str, name: &str| -> Result<f64> {
            field.parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "cells.csv line {}: bad {name} value {field:?}",
                    idx + 2
                ))
            })
        };
        observations.push(Observation {
            n: parse(fields[1], "N")? as usize,
            e: parse(fields[2], "E")?,
            a: parse(fields[9], "A")?,
            score: if fields[11].is_empty() {
                None
            } else {
                Some(parse(fields[11], "score")?)
            },
            filtered: fields[12] == "true",
        });
    }
    Ok(observations)
}

/// The four standard heat maps of a sweep, serialized.
pub fn heatmap_csvs(observations: &[Observation]) -> Vec<(&'static str, String)> {
    [
        ("heatmap_A_median.csv", Metric::AbsoluteError, 0.5),
        ("heatmap_A_q90.csv", Metric::AbsoluteError, 0.9),
        ("heatmap_score_median.csv", Metric::StandardizedScore, 0.5),
        ("heatmap_score_q90.csv", Metric::StandardizedScore, 0.9),
    ]
    .into_iter()
    .map(|(name, metric, p)| (name, aggregate(observations, metric, p).to_csv()))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_json_round_trip_and_defaults() {
        let text = r#"{"M":[5],"N":[30,90],"E":[0.1,1.0],"seed":3}"#;
        let grid: BenchmarkGrid = serde_json::from_str(text).unwrap();
        assert_eq!(grid.subsets, SubsetSchedule::default_schedule());
        assert_eq!(grid.m_list, vec![5]);
        let back = serde_json::to_string(&grid).unwrap();
        let again: BenchmarkGrid = serde_json::from_str(&back).unwrap();
        assert_eq!(grid, again);

        let explicit = r#"{"M":[5],"N":[30],"E":[0.1],"seed":3,"subsets":[[0],[0,1]]}"#;
        let grid: BenchmarkGrid = serde_json::from_str(explicit).unwrap();
        assert_eq!(grid.subsets.for_dims(5).unwrap().len(), 2);
    }

    #[test]
    fn grid_validation_rejects_bad_values() {
        let mut grid = BenchmarkGrid::desk_default(1);
        grid.validate().unwrap();
        grid.m_list = vec![4];
        assert!(grid.validate().is_err());
        grid = BenchmarkGrid::desk_default(1);
        grid.n_list = vec![1];
        assert!(grid.validate().is_err());
        grid = BenchmarkGrid::desk_default(1);
        grid.e_list = vec![-0.5];
        assert!(grid.validate().is_err());
        grid = BenchmarkGrid::desk_default(1);
        grid.n_list.clear();
        assert!(grid.validate().is_err());
        grid = BenchmarkGrid::desk_default(1);
        grid.subsets = SubsetSchedule::Named("fancy".into());
        assert!(grid.validate().is_err());
    }

    #[test]
    fn default_schedule_is_prefixes_plus_removals_deduplicated() {
        let subsets = SubsetSchedule::default_schedule().for_dims(5).unwrap();
        // 5 prefixes + 5 removals − 1 duplicate ({0,1,2,3} is both).
        assert_eq!(subsets.len(), 9);
        assert_eq!(subsets[0].axes(), &[0]);
        assert_eq!(subsets[4].axes(), &[0, 1, 2, 3, 4]);
        assert!(subsets.contains(&AxisSet::new(vec![1, 2, 3, 4], 5).unwrap()));
        let unique: std::collections::HashSet<_> = subsets.iter().cloned().collect();
        assert_eq!(unique.len(), subsets.len());

        let subsets7 = SubsetSchedule::default_schedule().for_dims(7).unwrap();
        assert_eq!(subsets7.len(), 13);
    }

    #[test]
    fn nearest_rank_follows_stated_convention() {
        assert_eq!(nearest_rank(&[0.01, 0.02, 0.03], 0.5), Some(0.02));
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&ten, 0.9), Some(9.0));
        assert_eq!(nearest_rank(&ten, 1.0), Some(10.0));
        assert_eq!(nearest_rank(&[], 0.5), None);
    }

    #[test]
    fn truth_source_serves_tables_for_prefix_equivalent_subsets() {
        let truth = TruthSource::new();
        // Plain prefixes hit the embedded tables.
        let s2 = truth
            .closed_matrix(&AxisSet::new(vec![0, 1], 5).unwrap())
            .unwrap();
        assert_eq!(s2.max_abs_diff(&truth_closed_matrix(2)).unwrap(), 0.0);
        // Inert axes fold away: removing axis 5 of a 7-axis model keeps all
        // active axes, so the truth is the full-model table.
        let removal = AxisSet::new(vec![0, 1, 2, 3, 4, 6], 7).unwrap();
        let s = truth.closed_matrix(&removal).unwrap();
        assert_eq!(s.max_abs_diff(&truth_closed_matrix(5)).unwrap(), 0.0);
    }

    #[test]
    fn truth_source_oracle_path_is_cached_and_plausible() {
        let truth = TruthSource::new();
        let subset = AxisSet::new(vec![1, 2, 3, 4], 5).unwrap();
        let first = truth.closed_matrix(&subset).unwrap();
        let second = truth.closed_matrix(&subset).unwrap();
        assert_eq!(first.max_abs_diff(&second).unwrap(), 0.0);
        assert!(first.is_symmetric(1e-12));
        for l in 0..MNU9_OUTPUTS {
            assert!((-0.01..=1.01).contains(&first[(l, l)]), "diag {}", first[(l, l)]);
            // Dropping axis 0 can only lose explained variance.
            assert!(first[(l, l)] <= truth_closed_matrix(5)[(l, l)] + 0.01);
        }
    }

    #[test]
    fn aggregate_pools_per_coordinate_and_flags_empty_cells() {
        let obs = vec![
            Observation { n: 30, e: 0.1, a: 0.01, score: Some(1.0), filtered: false },
            Observation { n: 30, e: 0.1, a: 0.02, score: Some(2.0), filtered: false },
            Observation { n: 30, e: 0.1, a: 0.03, score: None, filtered: false },
            Observation { n: 30, e: 0.1, a: 9.00, score: Some(9.0), filtered: true },
            Observation { n: 90, e: 0.1, a: 0.5, score: Some(3.0), filtered: false },
            // The (90, 1.0) coordinate has only filtered elements.
            Observation { n: 90, e: 1.0, a: 0.7, score: Some(1.0), filtered: true },
            Observation { n: 30, e: 1.0, a: 0.4, score: None, filtered: false },
        ];
        let a_median = aggregate(&obs, Metric::AbsoluteError, 0.5);
        assert_eq!(a_median.n_values, vec![30, 90]);
        assert_eq!(a_median.e_values, vec![0.1, 1.0]);
        assert_abs_diff_eq!(a_median.values[0][0], 0.02);
        assert_abs_diff_eq!(a_median.values[0][1], 0.5);
        assert_abs_diff_eq!(a_median.values[1][0], 0.4);
        assert!(a_median.values[1][1].is_nan());
        let score_median = aggregate(&obs, Metric::StandardizedScore, 0.5);
        // Filtered and score-less elements never enter the pool.
        assert_abs_diff_eq!(score_median.values[0][0], 1.0);
        assert!(score_median.values[1][0].is_nan());
    }

    #[test]
    fn heatmap_csv_orientation_and_format() {
        let table = HeatmapTable {
            n_values: vec![30, 90],
            e_values: vec![0.0025, 0.1],
            values: vec![vec![0.5, 0.25], vec![1.0, f64::NAN]],
        };
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "E\\N,30,90");
        // Least noise first (−log₁₀E descending).
        assert!(lines[1].starts_with("2.5000000000000001e-3,"));
        assert!(lines[2].starts_with("1.0000000000000001e-1,"));
        assert!(lines[2].ends_with("NaN"));
    }

    #[test]
    fn tiny_cell_runs_deterministically_and_balances_accounts() {
        let schedule = SubsetSchedule::Explicit(vec![vec![0], vec![0, 1, 2, 3, 4]]);
        let truth = TruthSource::new();
        let first = run_cell(5, 24, 0.1, 11, &schedule, &truth).unwrap();
        let second = run_cell(5, 24, 0.1, 11, &schedule, &truth).unwrap();
        assert_eq!(cells_csv(&first), cells_csv(&second));
        assert_eq!(first.len(), FOLDS as usize);
        for fold in &first {
            assert_eq!(fold.rmse.len(), MNU9_OUTPUTS);
            assert_eq!(fold.sd.len(), MNU9_OUTPUTS);
            if fold.flag.is_none() {
                assert_eq!(fold.rows.len(), 2 * MNU9_OUTPUTS * MNU9_OUTPUTS);
                for row in &fold.rows {
                    assert!(row.a >= 0.0);
                    if let Some(score) = row.score {
                        assert!(!row.filtered);
                        assert!(row.t > 0.0);
                        assert_abs_diff_eq!(score, row.a / row.t, epsilon = 0.0);
                    }
                }
                // Filter accounting: masked + surviving = scheduled elements.
                let filtered = fold.rows.iter().filter(|r| r.filtered).count();
                let surviving = fold.rows.iter().filter(|r| !r.filtered).count();
                assert_eq!(filtered + surviving, fold.rows.len());
            }
        }
    }

    #[test]
    fn fold_swap_leaves_pooled_metrics_unchanged() {
        let schedule = SubsetSchedule::Explicit(vec![vec![0, 1, 2, 3, 4]]);
        let truth = TruthSource::new();
        let mut cells = run_cell(5, 24, 0.1, 13, &schedule, &truth).unwrap();
        let obs: Vec<Observation> = cells.iter().flat_map(|c| c.observations()).collect();
        let before = aggregate(&obs, Metric::AbsoluteError, 0.5);
        for cell in &mut cells {
            cell.fold = 1 - cell.fold;
        }
        cells.swap(0, 1);
        let obs: Vec<Observation> = cells.iter().flat_map(|c| c.observations()).collect();
        let after = aggregate(&obs, Metric::AbsoluteError, 0.5);
        assert_eq!(before, after);
    }

    #[test]
    fn cells_csv_round_trips_through_parser() {
        let schedule = SubsetSchedule::Explicit(vec![vec![0]]);
        let truth = TruthSource::new();
        let cells = run_cell(5, 24, 0.5, 17, &schedule, &truth).unwrap();
        let csv = cells_csv(&cells);
        assert!(csv.starts_with("M,N,E,fold,m,l,lprime,"));
        let parsed = parse_cells_csv(&csv).unwrap();
        let direct: Vec<Observation> =
            cells.iter().flat_map(|c| c.observations()).collect();
        assert_eq!(parsed.len(), direct.len());
        for (p, d) in parsed.iter().zip(&direct) {
            assert_eq!(p.n, d.n);
            assert_eq!(p.e.to_bits(), d.e.to_bits());
            assert_eq!(p.a.to_bits(), d.a.to_bits());
            assert_eq!(p.filtered, d.filtered);
            match (p.score, d.score) {
                (Some(a), Some(b)) => assert_eq!(a.to_bits(), b.to_bits()),
                (None, None) => {}
                other => panic!("score mismatch {other:?}"),
            }
        }
        assert!(parse_cells_csv("bogus\n1,2").is_err());
    }
}
