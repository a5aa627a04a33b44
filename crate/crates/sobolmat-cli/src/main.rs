//! Command-line front end for the sensitivity-analysis library.
//!
//! Exit codes: 0 on success, 1 on usage or I/O errors, 2 on numerical
//! failures (degenerate variances, unfactorizable fits, unsupported
//! lengthscales, negative error variances).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sobolmat::bench::{
    cells_csv, heatmap_csvs, parse_cells_csv, run_grid, BenchmarkGrid, CellResult,
    Observation,
};
use sobolmat::gsa::{compute_reports, filter_reports, r_squared, FILTER_WINDOW};
use sobolmat::moments::{Backend, MomentEngine};
use sobolmat::sampling::{latin_hypercube, DesignMeta};
use sobolmat::surrogate::{fit, FitOptions};
use sobolmat::testfuncs::{add_noise, mnu9, standardize, truth_closed_matrix, NoiseSpec};
use sobolmat::{AxisSet, DesignMatrix, Error, Surrogate};

#[derive(Parser)]
#[command(
    name = "sobolmat",
    about = "Sobol' matrices and their standard errors from surrogate moments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the ground-truth closed Sobol' matrices of the 9-output test
    /// model (s1.csv … s5.csv).
    Truth(TruthArgs),
    /// Generate a latin-hypercube design of the 9-output test model with
    /// standardized, optionally noisy outputs.
    Sample(SampleArgs),
    /// Fit a surrogate to a design CSV and write it as JSON.
    Fit(FitArgs),
    /// Compute Sobol' reports for a fitted surrogate.
    Gsa(GsaArgs),
    /// Run the benchmark sweep.
    Bench(BenchArgs),
    /// Re-aggregate heat maps from an existing cells.csv.
    Report(ReportArgs),
}

#[derive(Args)]
struct TruthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Sample rows.
    #[arg(long)]
    n: usize,
    /// Input axes (at least 5).
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Noise magnitude E.
    #[arg(long, default_value_t = 0.0)]
    e: f64,
    /// Design seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Input design CSV.
    #[arg(long)]
    design: PathBuf,
    /// Fit seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optimizer restarts per output.
    #[arg(long, default_value_t = 8)]
    restarts: u32,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GsaArgs {
    /// Fitted surrogate JSON.
    #[arg(long)]
    model: PathBuf,
    /// Axis subsets, one per flag occurrence, as comma-separated axis ids
    /// (e.g. --subsets 0 --subsets 0,1,2).
    #[arg(long, required = true)]
    subsets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Grid definition JSON; omit to run the desk-scale default grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Master seed (overrides the grid file's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Existing cells.csv.
    #[arg(long)]
    cells: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Clap renders its own message (help/version go to stdout,
            // errors to stderr); exit 0 for the former, 1 for the latter.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err
                .chain()
                .any(|cause| matches!(cause.downcast_ref::<Error>(), Some(e) if e.is_numerical()));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Truth(args) => truth(&args),
        Command::Sample(args) => sample(&args),
        Command::Fit(args) => fit_command(&args),
        Command::Gsa(args) => gsa(&args),
        Command::Bench(args) => bench(&args),
        Command::Report(args) => report(&args),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn truth(args: &TruthArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    for k in 1..=5 {
        let path = args.out.join(format!("s{k}.csv"));
        write_file(&path, &truth_closed_matrix(k).to_csv())?;
    }
    println!("wrote s1.csv…s5.csv to {}", args.out.display());
    Ok(())
}

fn sample(args: &SampleArgs) -> Result<()> {
    let inputs = latin_hypercube(args.n, args.m, args.seed);
    let mut raw = ndarray::Array2::zeros((args.n, 9));
    let mut row = vec![0.0; args.m];
    for i in 0..args.n {
        for j in 0..args.m {
            row[j] = inputs[[i, j]];
        }
        let y = mnu9(&row)?;
        for (l, &value) in y.iter().enumerate() {
            raw[[i, l]] = value;
        }
    }
    let (standardized, _, _) = standardize(&raw)?;
    let noise = NoiseSpec::new(args.e, args.seed)?;
    let outputs = add_noise(&standardized, &noise);
    let design = DesignMatrix::new(
        inputs,
        outputs,
        DesignMeta { seed: args.seed, fold: 0, noise },
    )?;
    write_file(&args.out, &design.to_csv())?;
    println!(
        "wrote {} rows × ({} inputs + 9 outputs) to {}",
        args.n,
        args.m,
        args.out.display()
    );
    Ok(())
}

fn fit_command(args: &FitArgs) -> Result<()> {
    let text = fs::read_to_string(&args.design)
        .with_context(|| format!("reading {}", args.design.display()))?;
    let design = DesignMatrix::from_csv(&text)?;
    let options = FitOptions {
        seed: args.seed,
        restarts: args.restarts,
        ..FitOptions::default()
    };
    let surrogate = fit(&design, &options)?;
    write_file(&args.out, &surrogate.to_json())?;
    println!(
        "fitted {} outputs on {} points; wrote {}",
        surrogate.output_count(),
        surrogate.training_points(),
        args.out.display()
    );
    Ok(())
}

fn parse_subset(text: &str, ambient: usize) -> Result<AxisSet> {
    let mut axes = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let axis: usize = part
            .parse()
            .with_context(|| format!("bad axis id {part:?} in subset {text:?}"))?;
        axes.push(axis);
    }
    Ok(AxisSet::new(axes, ambient)?)
}

fn gsa(args: &GsaArgs) -> Result<()> {
    let text = fs::read_to_string(&args.model)
        .with_context(|| format!("reading {}", args.model.display()))?;
    let surrogate = Surrogate::from_json(&text)?;
    let ambient = surrogate.input_dim();
    let subsets: Vec<AxisSet> = args
        .subsets
        .iter()
        .map(|s| parse_subset(s, ambient))
        .collect::<Result<_>>()?;

    let engine = MomentEngine::new(&surrogate, Backend::ClosedForm, 0.0)?;
    let reports = compute_reports(&engine, &subsets)?;
    let (_, events) = filter_reports(&reports, FILTER_WINDOW);

    ensure_dir(&args.out)?;
    let mut diagnostics = Vec::new();
    for report in &reports {
        let label = if report.subset.is_empty() {
            "empty".to_string()
        } else {
            report
                .subset
                .axes()
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join("+")
        };
        for (name, matrix) in [
            ("S", &report.s),
            ("S_total", &report.s_total),
            ("T", &report.t),
            ("T_total", &report.t_total),
            ("V", &report.v),
        ] {
            let path = args.out.join(format!("{name}_{label}.csv"));
            write_file(&path, &matrix.to_csv())?;
        }
        let r2 = r_squared(&engine, &report.subset, 4096, 1)?;
        diagnostics.push(serde_json::json!({
            "subset": report.subset.axes(),
            "total_standard_deviations": report.d,
            "r_squared": r2,
            "max_dispersion_ratio": report.diagnostics.dispersion_ratio.max_abs(),
            "clamped_error_entries": report.diagnostics.clamped_entries,
        }));
    }
    let sidecar = serde_json::json!({
        "reports": diagnostics,
        "window_violations": events
            .iter()
            .map(|ev| {
                serde_json::json!({
                    "subset": ev.subset.axes(),
                    "matrix": ev.matrix,
                    "element": [ev.l, ev.lp],
                    "value": ev.value,
                })
            })
            .collect::<Vec<_>>(),
    });
    write_file(
        &args.out.join("diagnostics.json"),
        &serde_json::to_string_pretty(&sidecar).context("serializing diagnostics")?,
    )?;
    println!(
        "wrote {} report(s) and diagnostics.json to {}",
        reports.len(),
        args.out.display()
    );
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let mut grid = match &args.grid {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<BenchmarkGrid>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => BenchmarkGrid::desk_default(0),
    };
    if let Some(seed) = args.seed {
        grid.seed = seed;
    }
    let cells = run_grid(&grid, args.workers.max(1))?;
    write_outputs(&args.out, &cells)?;
    let flagged = cells.iter().filter(|c| c.flag.is_some()).count();
    println!(
        "ran {} fold results ({} flagged); wrote cells.csv and heat maps to {}",
        cells.len(),
        flagged,
        args.out.display()
    );
    Ok(())
}

fn write_outputs(dir: &Path, cells: &[CellResult]) -> Result<()> {
    ensure_dir(dir)?;
    write_file(&dir.join("cells.csv"), &cells_csv(cells))?;
    let observations: Vec<Observation> =
        cells.iter().flat_map(|c| c.observations()).collect();
    for (name, csv) in heatmap_csvs(&observations) {
        write_file(&dir.join(name), &csv)?;
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.cells)
        .with_context(|| format!("reading {}", args.cells.display()))?;
    let observations = parse_cells_csv(&text)?;
    ensure_dir(&args.out)?;
    for (name, csv) in heatmap_csvs(&observations) {
        write_file(&args.out.join(name), &csv)?;
    }
    println!(
        "aggregated {} observations into heat maps in {}",
        observations.len(),
        args.out.display()
    );
    Ok(())
}
