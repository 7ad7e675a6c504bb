//! Monte-Carlo harness.
//!
//! Each replication draws `X` (`N × p`, i.i.d. unit-variance entries), sets
//! `S_N = p⁻¹ Σ^{1/2} X X* Σ^{1/2}` with `Σ_N` diagonal, and works in the basis
//! of sample eigenvectors `U`. Replication `r` uses ChaCha20 stream `r` under
//! the configured seed, so results do not depend on scheduling.

use nalgebra::{ComplexField, DMatrix};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shrinkage::{self, ShrinkageCurve, TraceStats};
use crate::spectrum::PopulationSpectrum;
use crate::stieltjes::{check_gamma_not_one, StieltjesSolution};

/// Relative threshold, against the largest sample eigenvalue, below which an
/// eigenvalue counts as zero.
pub const ZERO_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryLaw {
    #[default]
    RealGaussian,
    ComplexGaussian,
}

/// Extra statistics gathered alongside the PRIAL run. Empty vectors skip them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    #[serde(default)]
    pub delta_grid: Vec<f64>,
    #[serde(default)]
    pub lambda_bins: Vec<f64>,
    #[serde(default)]
    pub tau_bins: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub n: usize,
    pub p: usize,
    pub spectrum: PopulationSpectrum,
    pub reps: usize,
    pub seed: u64,
    pub entry_law: EntryLaw,
    pub outputs: Outputs,
}

impl SimulationConfig {
    pub fn new(n: usize, p: usize, spectrum: PopulationSpectrum, reps: usize, seed: u64) -> Self {
        Self {
            n,
            p,
            spectrum,
            reps,
            seed,
            entry_law: EntryLaw::RealGaussian,
            outputs: Outputs::default(),
        }
    }

    /// `γ = p / N`.
    pub fn gamma(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!(
                "N must be >= 2, got {}",
                self.n
            )));
        }
        if self.p < 1 {
            return Err(Error::InvalidArgument("p must be >= 1".into()));
        }
        if self.reps < 1 {
            return Err(Error::InvalidArgument("reps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sample eigenvectors as columns, ordered like [`Draw::eigenvalues`].
#[derive(Debug, Clone)]
pub enum Eigenvectors {
    Real(DMatrix<f64>),
    Complex(DMatrix<Complex64>),
}

fn squared_moduli_of<T: ComplexField<RealField = f64>>(u: &DMatrix<T>) -> DMatrix<f64> {
    u.map(|v| v.modulus_squared())
}

fn orthonormality_error_of<T: ComplexField<RealField = f64>>(u: &DMatrix<T>) -> f64 {
    let g = u.adjoint() * u;
    let mut worst: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((g[(i, j)].clone() - target).modulus());
        }
    }
    worst
}

impl Eigenvectors {
    /// `|U_ji|²`; rows index population coordinates, columns sample eigenvectors.
    pub fn squared_moduli(&self) -> DMatrix<f64> {
        match self {
            Self::Real(u) => squared_moduli_of(u),
            Self::Complex(u) => squared_moduli_of(u),
        }
    }

    /// `max |U*U − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        match self {
            Self::Real(u) => orthonormality_error_of(u),
            Self::Complex(u) => orthonormality_error_of(u),
        }
    }
}

/// One replication.
#[derive(Debug, Clone)]
pub struct Draw {
    /// Diagonal of `Σ_N`.
    pub sigma: Vec<f64>,
    /// Descending; round-off negatives are clamped to zero.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Eigenvectors,
    /// `Tr S_N` from the matrix diagonal.
    pub trace_s: f64,
    /// Sum of the eigenvalues before clamping.
    pub eigenvalue_sum: f64,
}

impl Draw {
    pub fn zero_count(&self) -> usize {
        let thr = ZERO_THRESHOLD * self.eigenvalues.first().copied().unwrap_or(0.0);
        self.eigenvalues.iter().filter(|&&l| l <= thr).count()
    }

    pub fn dtilde(&self) -> Vec<f64> {
        oracle_dtilde(&self.eigenvectors, &self.sigma)
    }
}

fn rng_for(seed: u64, rep: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

fn eigensystem<T: ComplexField<RealField = f64>>(
    c: DMatrix<T>,
    p: usize,
) -> (Vec<f64>, DMatrix<T>, f64, f64) {
    let s = (&c * c.adjoint()).unscale(p as f64);
    let trace_s = s.diagonal().iter().map(|v| v.clone().real()).sum();
    let eig = s.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let raw_sum = eig.eigenvalues.iter().sum();
    let values = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let u = DMatrix::from_fn(c.nrows(), order.len(), |i, j| {
        eig.eigenvectors[(i, order[j])].clone()
    });
    (values, u, trace_s, raw_sum)
}

/// Draws replication `rep`.
pub fn generate(config: &SimulationConfig, rep: usize) -> Result<Draw> {
    config.validate()?;
    let sigma = config.spectrum.population_eigenvalues(config.n);
    let root: Vec<f64> = sigma.iter().map(|s| s.sqrt()).collect();
    let mut rng = rng_for(config.seed, rep as u64);
    let (n, p) = (config.n, config.p);
    let (eigenvalues, eigenvectors, trace_s, eigenvalue_sum) = match config.entry_law {
        EntryLaw::RealGaussian => {
            let c = DMatrix::from_fn(n, p, |j, _| root[j] * rng.sample::<f64, _>(StandardNormal));
            let (v, u, t, s) = eigensystem(c, p);
            (v, Eigenvectors::Real(u), t, s)
        }
        EntryLaw::ComplexGaussian => {
            let c = DMatrix::from_fn(n, p, |j, _| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im) * (root[j] * std::f64::consts::FRAC_1_SQRT_2)
            });
            let (v, u, t, s) = eigensystem(c, p);
            (v, Eigenvectors::Complex(u), t, s)
        }
    };
    Ok(Draw {
        sigma,
        eigenvalues,
        eigenvectors,
        trace_s,
        eigenvalue_sum,
    })
}

/// `d̃_i = u_i* Σ_N u_i` for diagonal `Σ_N`.
pub fn oracle_dtilde(eigenvectors: &Eigenvectors, sigma: &[f64]) -> Vec<f64> {
    let w = eigenvectors.squared_moduli();
    (0..w.ncols())
        .map(|i| (0..w.nrows()).map(|j| sigma[j] * w[(j, i)]).sum())
        .collect()
}

/// Rep-averaged `Δ_N(x) = N⁻¹ Σ_i d̃_i 1[λ_i ≤ x]` on a fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDelta {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// `Δ_N(∞) = N⁻¹ Σ d̃_i` for each replication.
    pub totals: Vec<f64>,
}

fn delta_step(eigs: &[f64], dtilde: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = eigs.len() as f64;
    grid.iter()
        .map(|&x| {
            eigs.iter()
                .zip(dtilde)
                .filter(|(&l, _)| l <= x)
                .map(|(_, d)| d)
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Binned `N |u_i* v_j|²` with sample eigenvalue bin × population eigenvalue bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapBin {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub tau_lo: f64,
    pub tau_hi: f64,
    /// Pairs `(i, j)` falling in the bin, summed over replications.
    pub count: u64,
    pub mean: Option<f64>,
    /// Ratio-estimator standard error with replications as units.
    pub se: Option<f64>,
    pub empty: bool,
}

fn bin_index(edges: &[f64], x: f64) -> Option<usize> {
    if edges.len() < 2 || x < edges[0] || x > edges[edges.len() - 1] {
        return None;
    }
    Some((edges.partition_point(|&e| e <= x) - 1).min(edges.len() - 2))
}

fn check_edges(edges: &[f64], what: &str) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(format!(
            "{what} edges need at least two strictly ascending values"
        )));
    }
    Ok(())
}

/// Per-replication sums and counts, row-major over `(λ bin, τ bin)`.
fn overlap_sums(draw: &Draw, lambda_bins: &[f64], tau_bins: &[f64]) -> (Vec<f64>, Vec<u64>) {
    let cols = tau_bins.len() - 1;
    let size = (lambda_bins.len() - 1) * cols;
    let mut sums = vec![0.0; size];
    let mut counts = vec![0u64; size];
    let w = draw.eigenvectors.squared_moduli();
    let n = draw.sigma.len() as f64;
    let tau_index: Vec<Option<usize>> =
        draw.sigma.iter().map(|&t| bin_index(tau_bins, t)).collect();
    for (i, &l) in draw.eigenvalues.iter().enumerate() {
        let Some(bl) = bin_index(lambda_bins, l) else {
            continue;
        };
        for (j, bt) in tau_index.iter().enumerate() {
            if let Some(bt) = bt {
                sums[bl * cols + bt] += n * w[(j, i)];
                counts[bl * cols + bt] += 1;
            }
        }
    }
    (sums, counts)
}

fn overlap_table(
    per_rep: &[(Vec<f64>, Vec<u64>)],
    lambda_bins: &[f64],
    tau_bins: &[f64],
) -> Vec<OverlapBin> {
    let cols = tau_bins.len() - 1;
    let reps = per_rep.len() as f64;
    let mut out = Vec::new();
    for bl in 0..lambda_bins.len() - 1 {
        for bt in 0..cols {
            let k = bl * cols + bt;
            let count: u64 = per_rep.iter().map(|r| r.1[k]).sum();
            let total: f64 = per_rep.iter().map(|r| r.0[k]).sum();
            let (mean, se) = if count == 0 {
                (None, None)
            } else {
                let mean = total / count as f64;
                let se = (per_rep.len() > 1).then(|| {
                    let xbar = count as f64 / reps;
                    let ss: f64 = per_rep
                        .iter()
                        .map(|r| (r.0[k] - mean * r.1[k] as f64).powi(2))
                        .sum();
                    (ss / (reps * (reps - 1.0))).sqrt() / xbar
                });
                (Some(mean), se)
            };
            out.push(OverlapBin {
                lambda_lo: lambda_bins[bl],
                lambda_hi: lambda_bins[bl + 1],
                tau_lo: tau_bins[bt],
                tau_hi: tau_bins[bt + 1],
                count,
                mean,
                se,
                empty: count == 0,
            });
        }
    }
    out
}

fn draws<T, F>(config: &SimulationConfig, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Draw) -> Result<T> + Sync,
{
    config.validate()?;
    (0..config.reps)
        .into_par_iter()
        .map(|r| generate(config, r).and_then(&f))
        .collect()
}

pub fn empirical_delta(config: &SimulationConfig, grid: &[f64]) -> Result<EmpiricalDelta> {
    let per_rep = draws(config, |d| {
        let dt = d.dtilde();
        let total = dt.iter().sum::<f64>() / d.sigma.len() as f64;
        Ok((delta_step(&d.eigenvalues, &dt, grid), total))
    })?;
    Ok(average_delta(grid, &per_rep))
}

fn average_delta(grid: &[f64], per_rep: &[(Vec<f64>, f64)]) -> EmpiricalDelta {
    let reps = per_rep.len() as f64;
    let mut values = vec![0.0; grid.len()];
    for (v, _) in per_rep {
        for (acc, x) in values.iter_mut().zip(v) {
            *acc += x;
        }
    }
    values.iter_mut().for_each(|v| *v /= reps);
    EmpiricalDelta {
        grid: grid.to_vec(),
        values,
        totals: per_rep.iter().map(|r| r.1).collect(),
    }
}

pub fn empirical_overlap(
    config: &SimulationConfig,
    lambda_bins: &[f64],
    tau_bins: &[f64],
) -> Result<Vec<OverlapBin>> {
    check_edges(lambda_bins, "lambda")?;
    check_edges(tau_bins, "tau")?;
    let per_rep = draws(config, |d| Ok(overlap_sums(&d, lambda_bins, tau_bins)))?;
    Ok(overlap_table(&per_rep, lambda_bins, tau_bins))
}

/// Per-replication Frobenius losses against `U D̃ U*`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossNumerators {
    pub nonlinear: Vec<f64>,
    pub linear: Vec<f64>,
    pub sample: Vec<f64>,
    pub oracle: Vec<f64>,
}

/// Worst-case finite-N identity residuals across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityChecks {
    /// `max |Σ d̃_i − Tr Σ_N| / Tr Σ_N`.
    pub trace_sigma: f64,
    /// `max |Σ λ_i − Tr S_N| / Tr S_N`.
    pub trace_s: f64,
    pub orthonormality: f64,
    pub expected_zero_count: usize,
    /// Replications whose zero-eigenvalue count differs from the expected one.
    pub zero_count_mismatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub n: usize,
    pub p: usize,
    pub gamma: f64,
    pub reps: usize,
    pub seed: u64,
    pub entry_law: EntryLaw,
    pub prial_nonlinear: f64,
    pub prial_nonlinear_se: f64,
    pub prial_linear: f64,
    pub prial_linear_se: f64,
    pub prial_sample: f64,
    pub prial_oracle: f64,
    pub loss_numerators: LossNumerators,
    /// `‖S_N − U D̃ U*‖²_F` per replication.
    pub loss_denominators: Vec<f64>,
    pub identities: IdentityChecks,
    /// Sample eigenvalues corrected at the nearest support point.
    pub outside_support: usize,
    /// Mean `d̃_i` over zero eigenvalues, pooled across replications (γ < 1).
    pub null_space_dtilde: Option<f64>,
    pub empirical_delta: Option<EmpiricalDelta>,
    pub empirical_phi_bins: Option<Vec<OverlapBin>>,
    /// ChaCha20 stream ids used under `seed`, one per replication.
    pub seeds_used: Vec<u64>,
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `100 · (1 − Σ num / Σ den)`.
pub fn prial(numerators: &[f64], denominators: &[f64]) -> f64 {
    let den: f64 = denominators.iter().sum();
    let num: f64 = numerators.iter().sum();
    100.0 * (1.0 - num / den)
}

/// Leave-one-replication-out jackknife standard error of [`prial`].
pub fn prial_jackknife_se(numerators: &[f64], denominators: &[f64]) -> f64 {
    let r = numerators.len();
    if r < 2 {
        return 0.0;
    }
    let num: f64 = numerators.iter().sum();
    let den: f64 = denominators.iter().sum();
    let loo: Vec<f64> = (0..r)
        .map(|k| 100.0 * (1.0 - (num - numerators[k]) / (den - denominators[k])))
        .collect();
    let mean = loo.iter().sum::<f64>() / r as f64;
    let ss: f64 = loo.iter().map(|x| (x - mean).powi(2)).sum();
    ((r as f64 - 1.0) / r as f64 * ss).sqrt()
}

fn squared_gap(x: &[f64], d: &[f64]) -> f64 {
    x.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum()
}

struct RepStats {
    nonlinear: f64,
    linear: f64,
    sample: f64,
    trace_sigma_err: f64,
    trace_s_err: f64,
    orthonormality: f64,
    zero_count: usize,
    null_dtilde: (f64, usize),
    outside: usize,
    delta: Option<(Vec<f64>, f64)>,
    overlap: Option<(Vec<f64>, Vec<u64>)>,
}

fn rep_stats(config: &SimulationConfig, solution: &StieltjesSolution, d: Draw) -> Result<RepStats> {
    let dt = d.dtilde();
    let n = d.sigma.len() as f64;
    let trace_sigma: f64 = d.sigma.iter().sum();
    let shrunk = shrinkage::shrink_spectrum(&d.eigenvalues, solution)?;
    let linear = shrinkage::linear_shrinkage_oracle(
        &d.eigenvalues,
        TraceStats::from_dtilde(&d.eigenvalues, &dt),
    )?;
    let thr = ZERO_THRESHOLD * d.eigenvalues.first().copied().unwrap_or(0.0);
    let null_dtilde = d
        .eigenvalues
        .iter()
        .zip(&dt)
        .filter(|(&l, _)| l <= thr)
        .fold((0.0, 0usize), |(s, k), (_, &x)| (s + x, k + 1));
    let outputs = &config.outputs;
    let delta = (!outputs.delta_grid.is_empty()).then(|| {
        (
            delta_step(&d.eigenvalues, &dt, &outputs.delta_grid),
            dt.iter().sum::<f64>() / n,
        )
    });
    let overlap = (!outputs.lambda_bins.is_empty() && !outputs.tau_bins.is_empty())
        .then(|| overlap_sums(&d, &outputs.lambda_bins, &outputs.tau_bins));
    Ok(RepStats {
        nonlinear: squared_gap(&shrunk.values, &dt),
        linear: squared_gap(&linear, &dt),
        sample: squared_gap(&d.eigenvalues, &dt),
        trace_sigma_err: (dt.iter().sum::<f64>() - trace_sigma).abs() / trace_sigma,
        trace_s_err: (d.eigenvalue_sum - d.trace_s).abs() / d.trace_s,
        orthonormality: d.eigenvectors.orthonormality_error(),
        zero_count: d.zero_count(),
        null_dtilde,
        outside: shrunk.outside_support.iter().filter(|&&f| f).count(),
        delta,
        overlap,
    })
}

/// PRIAL experiment with the limiting correction factor computed once from
/// `(H, p/N)`.
pub fn run_prial(config: &SimulationConfig) -> Result<SimulationReport> {
    config.validate()?;
    let gamma = config.gamma();
    check_gamma_not_one(gamma)?;
    let solution = StieltjesSolution::compute(&config.spectrum, gamma)?;
    run_prial_with(config, &solution)
}

/// As [`run_prial`] with a precomputed solution for `(H, p/N)`.
pub fn run_prial_with(
    config: &SimulationConfig,
    solution: &StieltjesSolution,
) -> Result<SimulationReport> {
    config.validate()?;
    let gamma = config.gamma();
    check_gamma_not_one(gamma)?;
    if (solution.gamma - gamma).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "solution has gamma {} but the configuration has {gamma}",
            solution.gamma
        )));
    }
    let outputs = &config.outputs;
    if !outputs.lambda_bins.is_empty() || !outputs.tau_bins.is_empty() {
        check_edges(&outputs.lambda_bins, "lambda")?;
        check_edges(&outputs.tau_bins, "tau")?;
    }
    let stats = draws(config, |d| rep_stats(config, solution, d))?;

    let nonlinear: Vec<f64> = stats.iter().map(|s| s.nonlinear).collect();
    let linear: Vec<f64> = stats.iter().map(|s| s.linear).collect();
    let sample: Vec<f64> = stats.iter().map(|s| s.sample).collect();
    let oracle = vec![0.0; stats.len()];
    let expected_zero_count = config.n.saturating_sub(config.p);
    let identities = IdentityChecks {
        trace_sigma: stats.iter().map(|s| s.trace_sigma_err).fold(0.0, f64::max),
        trace_s: stats.iter().map(|s| s.trace_s_err).fold(0.0, f64::max),
        orthonormality: stats.iter().map(|s| s.orthonormality).fold(0.0, f64::max),
        expected_zero_count,
        zero_count_mismatches: stats
            .iter()
            .filter(|s| s.zero_count != expected_zero_count)
            .count(),
    };
    let (null_sum, null_count) = stats.iter().fold((0.0, 0), |(a, k), s| {
        (a + s.null_dtilde.0, k + s.null_dtilde.1)
    });
    let empirical_delta = (!outputs.delta_grid.is_empty()).then(|| {
        let per_rep: Vec<(Vec<f64>, f64)> = stats
            .iter()
            .map(|s| s.delta.clone().unwrap_or_default())
            .collect();
        average_delta(&outputs.delta_grid, &per_rep)
    });
    let empirical_phi_bins = (!outputs.lambda_bins.is_empty()).then(|| {
        let per_rep: Vec<(Vec<f64>, Vec<u64>)> = stats
            .iter()
            .map(|s| s.overlap.clone().unwrap_or_default())
            .collect();
        overlap_table(&per_rep, &outputs.lambda_bins, &outputs.tau_bins)
    });

    Ok(SimulationReport {
        n: config.n,
        p: config.p,
        gamma,
        reps: config.reps,
        seed: config.seed,
        entry_law: config.entry_law,
        prial_nonlinear: prial(&nonlinear, &sample),
        prial_nonlinear_se: prial_jackknife_se(&nonlinear, &sample),
        prial_linear: prial(&linear, &sample),
        prial_linear_se: prial_jackknife_se(&linear, &sample),
        prial_sample: prial(&sample, &sample),
        prial_oracle: prial(&oracle, &sample),
        loss_numerators: LossNumerators {
            nonlinear,
            linear,
            sample: sample.clone(),
            oracle,
        },
        loss_denominators: sample,
        identities,
        outside_support: stats.iter().map(|s| s.outside).sum(),
        null_space_dtilde: (null_count > 0).then(|| null_sum / null_count as f64),
        empirical_delta,
        empirical_phi_bins,
        seeds_used: (0..config.reps as u64).collect(),
    })
}

/// Equal-mass bins of the limiting `F`.
///
/// Returns `(limit_edges, sample_edges)`. The first holds the quantiles
/// `F⁻¹(k / count)`. The second moves any edge sitting on a gap between
/// support intervals to the middle of that gap and opens the outer edges to
/// `0` and `10 ×` the upper edge, so finite-N eigenvalues that stray past an
/// edge stay with their cluster.
pub fn quantile_bins(solution: &StieltjesSolution, count: usize) -> (Vec<f64>, Vec<f64>) {
    let limit: Vec<f64> = (0..=count)
        .map(|k| solution.quantile(k as f64 / count as f64))
        .collect();
    let mut sample = limit.clone();
    for edge in sample.iter_mut().take(count).skip(1) {
        for w in solution.support.windows(2) {
            let (end, next) = (w[0].1, w[1].0);
            if *edge >= end - 1e-5 && *edge <= next {
                *edge = 0.5 * (end + next);
            }
        }
    }
    sample[0] = 0.0;
    sample[count] = 10.0 * limit[count];
    (limit, sample)
}

/// `Δ(x)` from the limit, for comparison with [`EmpiricalDelta`].
pub fn limiting_delta(grid: &[f64], solution: &StieltjesSolution) -> Result<Vec<f64>> {
    let curve = ShrinkageCurve::from_solution(solution)?;
    Ok(grid
        .iter()
        .map(|&x| curve.cumulative_delta(x, solution))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_config(n: usize, p: usize, reps: usize) -> SimulationConfig {
        SimulationConfig::new(n, p, PopulationSpectrum::point_mass(1.0).unwrap(), reps, 7)
    }

    fn three_atoms() -> PopulationSpectrum {
        PopulationSpectrum::from_atoms(&[(0.2, 1.0), (0.4, 3.0), (0.4, 10.0)]).unwrap()
    }

    #[test]
    fn law_of_large_numbers() {
        let d = generate(&identity_config(2, 1_000_000, 1), 0).unwrap();
        assert!(d.eigenvalues.iter().all(|l| (l - 1.0).abs() < 0.01));
    }

    #[test]
    fn orthonormal_and_sorted() {
        for law in [EntryLaw::RealGaussian, EntryLaw::ComplexGaussian] {
            let mut cfg = SimulationConfig::new(30, 60, three_atoms(), 1, 3);
            cfg.entry_law = law;
            let d = generate(&cfg, 0).unwrap();
            assert!(d.eigenvectors.orthonormality_error() <= 1e-10);
            assert!(d.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            let dt = d.dtilde();
            let tr: f64 = d.sigma.iter().sum();
            assert!((dt.iter().sum::<f64>() - tr).abs() <= 1e-12 * tr);
        }
    }

    #[test]
    fn rank_deficient_has_zero_eigenvalues() {
        let d = generate(&identity_config(40, 20, 1), 0).unwrap();
        assert_eq!(d.zero_count(), 20);
        assert!(d.dtilde().iter().all(|x| (x - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let cfg = SimulationConfig::new(10, 20, three_atoms(), 2, 11);
        let a = generate(&cfg, 1).unwrap();
        let b = generate(&cfg, 1).unwrap();
        let c = generate(&cfg, 0).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
        assert_ne!(a.eigenvalues, c.eigenvalues);
    }

    #[test]
    fn prial_bounds_are_exact() {
        let cfg = SimulationConfig::new(10, 20, three_atoms(), 20, 5);
        let r = run_prial(&cfg).unwrap();
        assert_eq!(r.prial_sample, 0.0);
        assert_eq!(r.prial_oracle, 100.0);
        assert!(r.loss_denominators.iter().all(|&x| x >= 0.0));
        assert_eq!(r, run_prial(&cfg).unwrap());
    }

    #[test]
    fn identity_population_overlap_is_one() {
        let cfg = identity_config(20, 40, 50);
        let bins = empirical_overlap(&cfg, &[0.0, 1.0, 5.0, 10.0], &[0.5, 1.5]).unwrap();
        for b in &bins[..2] {
            let (m, se) = (b.mean.unwrap(), b.se.unwrap());
            assert!((m - 1.0).abs() <= 3.0 * se, "{m} ± {se}");
        }
        assert!(bins[2].empty);
        assert_eq!(bins[2].count, 0);
    }

    #[test]
    fn empirical_delta_limits() {
        let cfg = SimulationConfig::new(20, 40, three_atoms(), 3, 1);
        let e = empirical_delta(&cfg, &[-1.0, 1e9]).unwrap();
        assert_eq!(e.values[0], 0.0);
        let tr = cfg.spectrum.population_eigenvalues(20).iter().sum::<f64>() / 20.0;
        for t in &e.totals {
            assert!((t - tr).abs() <= 1e-12 * tr);
        }
        assert!((e.values[1] - tr).abs() <= 1e-12 * tr);
    }

    #[test]
    fn top_eigenvalue_is_biased_upward() {
        let cfg = SimulationConfig::new(100, 200, three_atoms(), 100, 2);
        let gaps = draws(&cfg, |d| Ok(d.eigenvalues[0] - d.dtilde()[0])).unwrap();
        assert!(gaps.iter().sum::<f64>() / gaps.len() as f64 > 0.0);
    }

    #[test]
    fn shrinkage_reduces_dispersion() {
        let spec = three_atoms();
        let sol = StieltjesSolution::compute(&spec, 2.0).unwrap();
        let cfg = SimulationConfig::new(50, 100, spec, 10, 9);
        let var = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        };
        for r in 0..cfg.reps {
            let d = generate(&cfg, r).unwrap();
            let s = shrinkage::shrink_spectrum(&d.eigenvalues, &sol).unwrap();
            assert!(var(&s.values) <= var(&d.eigenvalues));
        }
    }

    #[test]
    fn identity_shrinkage_monte_carlo() {
        let sol =
            StieltjesSolution::compute(&PopulationSpectrum::point_mass(1.0).unwrap(), 2.0).unwrap();
        let d = generate(&identity_config(100, 200, 1), 0).unwrap();
        let s = shrinkage::shrink_spectrum(&d.eigenvalues, &sol).unwrap();
        assert!(s.values.iter().all(|&v| (0.5..=1.5).contains(&v)));
        let mean = s.values.iter().sum::<f64>() / 100.0;
        assert!((mean - 1.0).abs() <= 0.05);
        let s = shrinkage::shrink_inverse_spectrum(&d.eigenvalues, &sol).unwrap();
        let mean = s.values.iter().sum::<f64>() / 100.0;
        assert!((mean - 1.0).abs() <= 0.05);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&identity_config(1, 5, 1), 0).is_err());
        assert!(generate(&identity_config(5, 0, 1), 0).is_err());
        assert!(run_prial(&identity_config(5, 5, 2)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn exact_finite_n_identities(
                n in 2usize..14,
                p in 1usize..28,
                seed in any::<u64>(),
                complex in any::<bool>(),
            ) {
                let mut cfg = SimulationConfig::new(n, p, three_atoms(), 1, seed);
                if complex {
                    cfg.entry_law = EntryLaw::ComplexGaussian;
                }
                let d = generate(&cfg, 0).unwrap();
                let tr: f64 = d.sigma.iter().sum();
                prop_assert!((d.dtilde().iter().sum::<f64>() - tr).abs() <= 1e-12 * tr);
                prop_assert!((d.eigenvalue_sum - d.trace_s).abs() <= 1e-12 * d.trace_s);
                prop_assert!(d.eigenvectors.orthonormality_error() <= 1e-10);
                prop_assert_eq!(d.zero_count(), n.saturating_sub(p));
            }
        }
    }
}
