//! Command-line front end.
//!
//! Every subcommand reads a JSON config, writes CSV/JSON files into `--out`
//! and finishes by writing `manifest.json`. Exit codes: 0 success, 1 usage
//! error, 2 numeric failure, 3 assertion failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::overlap::{self, OverlapKernel};
use crate::shrinkage::{self, ShrinkageCurve};
use crate::simulate::{self, EntryLaw, Outputs, SimulationConfig, SimulationReport};
use crate::spectrum::{PopulationSpectrum, SpectrumDocument};
use crate::stieltjes::{self, StieltjesSolution};

/// Environment variable capping worker threads (`0` or unset: automatic).
pub const THREADS_ENV: &str = "RMT_SHRINK_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";

const KERNEL_GAMMAS: [f64; 3] = [2.0, 10.0, 100.0];
const KERNEL_T_POINTS: usize = 400;
const MOMENT_TOLERANCE: f64 = 1e-3;
const DEFAULT_PRIAL_THRESHOLD: f64 = 90.0;
const PAPER_SCALE_REPS: usize = 10_000;
const PAPER_SCALE_SIZES: [usize; 11] = [5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100];

#[derive(Debug, Parser)]
#[command(
    name = "rmt-shrink",
    version,
    about = "Limiting spectra, overlap kernels and nonlinear shrinkage of sample covariance matrices"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Limiting sample spectral density, one CSV per aspect ratio.
    Density(CommonArgs),
    /// Overlap kernel at the upper support edge.
    Kernel(CommonArgs),
    /// Covariance and inverse-covariance shrinkage curves.
    Shrink(CommonArgs),
    /// Monte-Carlo PRIAL experiment.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Fail with exit code 3 unless the nonlinear PRIAL clears the threshold
    /// and beats the linear baseline.
    #[arg(long)]
    pub assert: bool,
    /// 10,000 replications over the full size sweep (slow).
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("assertion failed: {0}")]
    Assertion(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Numeric(_) => 2,
            Self::Assertion(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::GammaOne => Self::Usage(
                "gamma = 1 is excluded: the limiting density is unbounded at zero \
                 and the shrinkage formulas are undefined"
                    .into(),
            ),
            Error::NonPositiveSupport(_)
            | Error::MassNotOne(_)
            | Error::InvalidSpectrum(_)
            | Error::DomainError(_)
            | Error::InvalidArgument(_) => Self::Usage(e.to_string()),
            _ => Self::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Numeric(format!("i/o: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Spectrum given inline or as a path relative to the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SpectrumSource {
    Path(PathBuf),
    Inline(SpectrumDocument),
}

/// Evaluation grid: explicit values, or `points` evenly spaced over
/// `[lo, hi]` with command-specific defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub values: Option<Vec<f64>>,
    pub points: Option<usize>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl GridConfig {
    fn resolve(&self, lo: f64, hi: f64, points: usize) -> CliResult<Vec<f64>> {
        if let Some(values) = &self.values {
            if values.is_empty() {
                return Err(CliError::Usage("empty grid".into()));
            }
            return Ok(values.clone());
        }
        let points = self.points.unwrap_or(points);
        if points == 0 {
            return Err(CliError::Usage("empty grid".into()));
        }
        if points == 1 {
            return Err(CliError::Usage("grid needs at least two points".into()));
        }
        let (lo, hi) = (self.lo.unwrap_or(lo), self.hi.unwrap_or(hi));
        if !(hi > lo) {
            return Err(CliError::Usage(format!(
                "grid bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok((0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect())
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spectrum: Option<SpectrumSource>,
    #[serde(default)]
    pub gammas: Vec<f64>,
    pub grid: Option<GridConfig>,
    pub t_grid: Option<GridConfig>,
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub entry_law: Option<EntryLaw>,
    /// Dimensions for a PRIAL sweep at fixed `p / n`.
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub outputs: Outputs,
    pub prial_threshold: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub duration_seconds: f64,
}

fn load_config(path: &Path) -> CliResult<(RunConfig, PopulationSpectrum)> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
    let spec = match &config.spectrum {
        None => return Err(CliError::Usage("config has no spectrum".into())),
        Some(SpectrumSource::Inline(doc)) => PopulationSpectrum::from_document(doc)?,
        Some(SpectrumSource::Path(p)) => {
            let full = path.parent().unwrap_or(Path::new(".")).join(p);
            let text = fs::read_to_string(&full).map_err(|e| {
                CliError::Usage(format!("cannot read spectrum {}: {e}", full.display()))
            })?;
            PopulationSpectrum::from_json(&text)?
        }
    };
    Ok((config, spec))
}

fn gamma_tag(gamma: f64) -> String {
    format!("{gamma}").replace('.', "p")
}

struct Sink {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Sink {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            fs::remove_file(&manifest)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write<F>(&mut self, name: &str, f: F) -> CliResult<()>
    where
        F: FnOnce(&mut fs::File) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let mut file = fs::File::create(&path)?;
        f(&mut file)?;
        self.written.push(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).expect("serializable output");
        self.write(name, |f| std::io::Write::write_all(f, text.as_bytes()))
    }

    fn finish(
        self,
        command: &str,
        config: &Path,
        seed: Option<u64>,
        start: Instant,
    ) -> CliResult<()> {
        let manifest = RunManifest {
            command: command.into(),
            config: config.to_path_buf(),
            outputs: self.written,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            duration_seconds: start.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

fn require_gammas(config: &RunConfig) -> CliResult<&[f64]> {
    if config.gammas.is_empty() {
        return Err(CliError::Usage("config lists no gammas".into()));
    }
    Ok(&config.gammas)
}

/// Solution on the configured grid, defaulting to [`stieltjes::default_grid`].
fn solution_for(
    config: &RunConfig,
    spec: &PopulationSpectrum,
    gamma: f64,
) -> CliResult<StieltjesSolution> {
    stieltjes::check_gamma_not_one(gamma)?;
    let default = stieltjes::default_grid(spec, gamma, stieltjes::DEFAULT_GRID_POINTS);
    let grid = match &config.grid {
        None => default,
        Some(g) => g.resolve(default[0], default[default.len() - 1], default.len())?,
    };
    let sol = stieltjes::boundary_values(spec, gamma, &grid)?;
    let failed: Vec<f64> = grid
        .iter()
        .zip(&sol.valid)
        .filter(|(_, ok)| !**ok)
        .map(|(&l, _)| l)
        .collect();
    if !failed.is_empty() {
        let detail = stieltjes::boundary_value(spec, gamma, failed[0])
            .err()
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(CliError::Numeric(format!(
            "solver failed at {} grid point(s) for gamma {gamma}, first at lambda {}: {detail}",
            failed.len(),
            failed[0]
        )));
    }
    let mut sol = sol;
    sol.support = stieltjes::support_edges(&sol)?;
    Ok(sol)
}

fn cmd_density(args: &CommonArgs) -> CliResult<()> {
    let start = Instant::now();
    let (config, spec) = load_config(&args.config)?;
    let gammas = require_gammas(&config)?;
    let mut sink = Sink::new(&args.out)?;
    for &gamma in gammas {
        let sol = solution_for(&config, &spec, gamma)?;
        sink.write(&format!("density_gamma_{}.csv", gamma_tag(gamma)), |f| {
            let mut w = csv::Writer::from_writer(f);
            w.write_record(["lambda", "density", "m_re", "m_im"])?;
            for i in 0..sol.grid.len() {
                w.write_record([
                    crate::fmt_float(sol.grid[i]),
                    crate::fmt_float(sol.density[i]),
                    crate::fmt_float(sol.m_breve[i].re),
                    crate::fmt_float(sol.m_breve[i].im),
                ])?;
            }
            w.flush()
        })?;
        println!(
            "gamma {gamma}: support {:?}, total mass {:.6}",
            sol.support,
            sol.total_mass()
        );
    }
    sink.finish("density", &args.config, None, start)
}

#[derive(Debug, Serialize)]
struct KernelSummary {
    gamma: f64,
    l: f64,
    normalization: f64,
    b_discrepancy: f64,
}

fn cmd_kernel(args: &CommonArgs) -> CliResult<()> {
    let start = Instant::now();
    let (config, spec) = load_config(&args.config)?;
    let mut gammas: Vec<f64> = KERNEL_GAMMAS.to_vec();
    for &g in &config.gammas {
        if !gammas.contains(&g) {
            gammas.push(g);
        }
    }
    let t_grid = match &config.t_grid {
        None if spec.h1() == spec.h2() => vec![spec.h1()],
        t => t
            .clone()
            .unwrap_or_default()
            .resolve(spec.h1(), spec.h2(), KERNEL_T_POINTS)?,
    };
    let mut sink = Sink::new(&args.out)?;
    let mut summary = Vec::new();
    for gamma in gammas {
        let sol = solution_for(&config, &spec, gamma)?;
        let l = sol.upper_edge().ok_or(Error::EmptySupport)?;
        let kernel = OverlapKernel::evaluate(&sol, &[l], &t_grid)?;
        let norm = overlap::normalization(l, &sol)?;
        sink.write(&format!("kernel_gamma_{}.csv", gamma_tag(gamma)), |f| {
            kernel.write_csv(f)
        })?;
        println!("gamma {gamma}: l = {l:.6}, normalization {norm:.9}");
        summary.push(KernelSummary {
            gamma,
            l,
            normalization: norm,
            b_discrepancy: kernel.b_discrepancy[0],
        });
    }
    sink.write_json("kernel_summary.json", &summary)?;
    sink.finish("kernel", &args.config, None, start)
}

#[derive(Debug, Serialize)]
struct ShrinkSummary {
    gamma: f64,
    delta_zero: Option<f64>,
    psi_zero: Option<f64>,
    delta_moment: f64,
    population_mean: f64,
    psi_moment: f64,
    population_inverse_mean: f64,
    linear_intercept: f64,
    linear_slope: f64,
    /// Whether `δ` is nondecreasing on the in-support grid points.
    delta_monotone: bool,
}

fn cmd_shrink(args: &CommonArgs) -> CliResult<()> {
    let start = Instant::now();
    let (config, spec) = load_config(&args.config)?;
    let gammas = require_gammas(&config)?;
    let mut sink = Sink::new(&args.out)?;
    let mut summary = Vec::new();
    let mut violations = Vec::new();
    for &gamma in gammas {
        let sol = solution_for(&config, &spec, gamma)?;
        let curve = ShrinkageCurve::from_solution(&sol)?;
        let linear = shrinkage::limiting_linear_baseline(&curve, &sol);
        sink.write(&format!("shrink_gamma_{}.csv", gamma_tag(gamma)), |f| {
            curve.write_csv(f, &sol, Some(linear))
        })?;
        let inside: Vec<f64> = curve
            .delta
            .iter()
            .zip(&sol.grid)
            .filter(|(_, &l)| sol.in_support(l))
            .map(|(&d, _)| d)
            .collect();
        let row = ShrinkSummary {
            gamma,
            delta_zero: curve.delta_zero,
            psi_zero: curve.psi_zero,
            delta_moment: curve.delta_moment(&sol),
            population_mean: spec.moment(1),
            psi_moment: curve.psi_moment(&sol),
            population_inverse_mean: spec.m_h_at_zero(),
            linear_intercept: linear.intercept,
            linear_slope: linear.slope,
            delta_monotone: inside.windows(2).all(|w| w[1] >= w[0]),
        };
        println!(
            "gamma {gamma}: ∫δ dF = {:.6} (∫τ dH = {:.6}), ∫ψ dF = {:.6} (∫τ⁻¹ dH = {:.6})",
            row.delta_moment, row.population_mean, row.psi_moment, row.population_inverse_mean
        );
        if (row.delta_moment - row.population_mean).abs() > MOMENT_TOLERANCE
            || (row.psi_moment - row.population_inverse_mean).abs() > MOMENT_TOLERANCE
        {
            violations.push(gamma);
        }
        summary.push(row);
    }
    sink.write_json("shrink_summary.json", &summary)?;
    if !violations.is_empty() {
        return Err(CliError::Assertion(format!(
            "moment conservation off by more than {MOMENT_TOLERANCE} for gamma {violations:?}"
        )));
    }
    sink.finish("shrink", &args.config, None, start)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    n: usize,
    p: usize,
    prial_nonlinear: f64,
    prial_nonlinear_se: f64,
    prial_linear: f64,
    prial_linear_se: f64,
}

fn write_losses(f: &mut fs::File, report: &SimulationReport) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["rep", "nonlinear", "linear", "sample"])?;
    let l = &report.loss_numerators;
    for r in 0..report.reps {
        w.write_record([
            r.to_string(),
            crate::fmt_float(l.nonlinear[r]),
            crate::fmt_float(l.linear[r]),
            crate::fmt_float(l.sample[r]),
        ])?;
    }
    w.flush()
}

fn write_bins(f: &mut fs::File, bins: &[simulate::OverlapBin]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(f);
    w.write_record([
        "lambda_lo",
        "lambda_hi",
        "tau_lo",
        "tau_hi",
        "count",
        "mean",
        "se",
    ])?;
    let opt = |x: Option<f64>| x.map(crate::fmt_float).unwrap_or_default();
    for b in bins {
        w.write_record([
            crate::fmt_float(b.lambda_lo),
            crate::fmt_float(b.lambda_hi),
            crate::fmt_float(b.tau_lo),
            crate::fmt_float(b.tau_hi),
            b.count.to_string(),
            opt(b.mean),
            opt(b.se),
        ])?;
    }
    w.flush()
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let start = Instant::now();
    let (config, spec) = load_config(&args.common.config)?;
    let n = config
        .n
        .ok_or_else(|| CliError::Usage("config needs n".into()))?;
    let p = config
        .p
        .ok_or_else(|| CliError::Usage("config needs p".into()))?;
    let mut reps = args.reps.or(config.reps).unwrap_or(1000);
    if args.paper_scale {
        reps = PAPER_SCALE_REPS;
    }
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let threshold = config.prial_threshold.unwrap_or(DEFAULT_PRIAL_THRESHOLD);
    let sim = SimulationConfig {
        n,
        p,
        spectrum: spec.clone(),
        reps,
        seed,
        entry_law: config.entry_law.unwrap_or_default(),
        outputs: config.outputs.clone(),
    };
    sim.validate()?;

    let mut sink = Sink::new(&args.common.out)?;
    let report = simulate::run_prial(&sim)?;
    sink.write("report.json", |f| {
        std::io::Write::write_all(f, report.to_json().as_bytes())
    })?;
    sink.write("losses.csv", |f| write_losses(f, &report))?;
    if let Some(bins) = &report.empirical_phi_bins {
        sink.write("overlap_bins.csv", |f| write_bins(f, bins))?;
    }
    println!(
        "N = {n}, p = {p}, reps = {reps}: PRIAL nonlinear {:.3} ± {:.3}, linear {:.3} ± {:.3}",
        report.prial_nonlinear,
        report.prial_nonlinear_se,
        report.prial_linear,
        report.prial_linear_se
    );

    let mut sizes = config.sizes.clone();
    if args.paper_scale {
        sizes = PAPER_SCALE_SIZES.to_vec();
    }
    if !sizes.is_empty() {
        let ratio = p as f64 / n as f64;
        let mut rows = Vec::new();
        for &size in &sizes {
            let sp = (ratio * size as f64).round() as usize;
            let cfg = SimulationConfig {
                n: size,
                p: sp,
                outputs: Outputs::default(),
                ..sim.clone()
            };
            let r = simulate::run_prial(&cfg)?;
            println!(
                "  N = {size:>4}: nonlinear {:.3}, linear {:.3}",
                r.prial_nonlinear, r.prial_linear
            );
            rows.push(SweepRow {
                n: size,
                p: sp,
                prial_nonlinear: r.prial_nonlinear,
                prial_nonlinear_se: r.prial_nonlinear_se,
                prial_linear: r.prial_linear,
                prial_linear_se: r.prial_linear_se,
            });
        }
        sink.write("prial_sweep.csv", |f| {
            let mut w = csv::Writer::from_writer(f);
            w.write_record([
                "n",
                "p",
                "prial_nonlinear",
                "prial_nonlinear_se",
                "prial_linear",
                "prial_linear_se",
            ])?;
            for r in &rows {
                w.write_record([
                    r.n.to_string(),
                    r.p.to_string(),
                    crate::fmt_float(r.prial_nonlinear),
                    crate::fmt_float(r.prial_nonlinear_se),
                    crate::fmt_float(r.prial_linear),
                    crate::fmt_float(r.prial_linear_se),
                ])?;
            }
            w.flush()
        })?;
    }

    if args.assert
        && !(report.prial_nonlinear >= threshold && report.prial_nonlinear > report.prial_linear)
    {
        return Err(CliError::Assertion(format!(
            "nonlinear PRIAL {:.3} must be >= {threshold} and above linear {:.3}",
            report.prial_nonlinear, report.prial_linear
        )));
    }
    sink.finish("simulate", &args.common.config, Some(seed), start)
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a non-negative integer")))?;
    if threads > 0 {
        // a second call in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Density(a) => cmd_density(a),
        Command::Kernel(a) => cmd_kernel(a),
        Command::Shrink(a) => cmd_shrink(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("rmt-shrink: {e}");
            e.exit_code()
        }
    }
}
