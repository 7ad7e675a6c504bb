//! Asymptotically optimal eigenvalue corrections.
//!
//! `δ(λ)` is the limit of `u_i* Σ u_i` for a sample eigenvector whose
//! eigenvalue sits at `λ`, and `ψ(λ)` the limit of `u_i* Σ⁻¹ u_i`:
//!
//! ```text
//! δ(λ) = λ / |1 − γ⁻¹ − γ⁻¹ λ m̆_F(λ)|²                 λ > 0
//! δ(0) = γ / ((1 − γ) m̆_F̲(0))                          γ < 1
//! ψ(λ) = (1 − γ⁻¹ − 2 γ⁻¹ λ Re m̆_F(λ)) / λ             λ > 0
//! ψ(0) = m̆_H(0) / (1 − γ) − m̆_F̲(0)                     γ < 1
//! ```
//!
//! Both vanish for `λ < 0`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stieltjes::{check_gamma_not_one, StieltjesSolution};

/// Sample eigenvalues at or below this fraction of the largest one count as zero.
pub const ZERO_RELATIVE_THRESHOLD: f64 = 1e-10;

fn zero_branch(solution: &StieltjesSolution) -> Option<f64> {
    solution.m_under_zero.filter(|_| solution.gamma < 1.0)
}

/// `δ(λ)`.
pub fn delta(lambda: f64, solution: &StieltjesSolution) -> Result<f64> {
    check_gamma_not_one(solution.gamma)?;
    if lambda > 0.0 {
        Ok(lambda / solution.correction_term(lambda)?.norm_sqr())
    } else if lambda == 0.0 {
        Ok(delta_zero(solution).unwrap_or(0.0))
    } else {
        Ok(0.0)
    }
}

/// `ψ(λ)`.
pub fn psi(lambda: f64, solution: &StieltjesSolution) -> Result<f64> {
    check_gamma_not_one(solution.gamma)?;
    if lambda > 0.0 {
        let c = solution.concentration();
        let m = solution.m_breve_at(lambda)?;
        Ok((1.0 - c - 2.0 * c * lambda * m.re) / lambda)
    } else if lambda == 0.0 {
        Ok(psi_zero(solution).unwrap_or(0.0))
    } else {
        Ok(0.0)
    }
}

/// `δ(0)`, defined for `γ < 1`.
pub fn delta_zero(solution: &StieltjesSolution) -> Option<f64> {
    let g = solution.gamma;
    zero_branch(solution).map(|mu| g / ((1.0 - g) * mu))
}

/// `ψ(0)`, defined for `γ < 1`.
pub fn psi_zero(solution: &StieltjesSolution) -> Option<f64> {
    let g = solution.gamma;
    zero_branch(solution).map(|mu| solution.spectrum.m_h_at_zero() / (1.0 - g) - mu)
}

/// `δ` and `ψ` tabulated on the grid of a [`StieltjesSolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageCurve {
    pub lambda_grid: Vec<f64>,
    pub delta: Vec<f64>,
    pub psi: Vec<f64>,
    pub delta_zero: Option<f64>,
    pub psi_zero: Option<f64>,
    pub gamma: f64,
}

impl ShrinkageCurve {
    pub fn from_solution(solution: &StieltjesSolution) -> Result<Self> {
        check_gamma_not_one(solution.gamma)?;
        let c = solution.concentration();
        let mut delta = Vec::with_capacity(solution.grid.len());
        let mut psi = Vec::with_capacity(solution.grid.len());
        for (i, &l) in solution.grid.iter().enumerate() {
            if !solution.valid[i] {
                delta.push(f64::NAN);
                psi.push(f64::NAN);
                continue;
            }
            let m = solution.m_breve[i];
            delta.push(l / (1.0 - c - c * l * m).norm_sqr());
            psi.push((1.0 - c - 2.0 * c * l * m.re) / l);
        }
        Ok(Self {
            lambda_grid: solution.grid.clone(),
            delta,
            psi,
            delta_zero: delta_zero(solution),
            psi_zero: psi_zero(solution),
            gamma: solution.gamma,
        })
    }

    /// `Δ(x) = ∫_{λ ≤ x} δ dF`, including `(1 − γ) δ(0)` for `x ≥ 0` when `γ < 1`.
    pub fn cumulative_delta(&self, x: f64, solution: &StieltjesSolution) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        solution.mass_at_zero * self.delta_zero.unwrap_or(0.0)
            + solution.integrate_density_weighted(&self.delta, x)
    }

    /// `Ψ(x) = ∫_{λ ≤ x} ψ dF`, including the atom at zero when `γ < 1`.
    pub fn cumulative_psi(&self, x: f64, solution: &StieltjesSolution) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        solution.mass_at_zero * self.psi_zero.unwrap_or(0.0)
            + solution.integrate_density_weighted(&self.psi, x)
    }

    /// `∫ δ dF`, which should equal `∫ τ dH`.
    pub fn delta_moment(&self, solution: &StieltjesSolution) -> f64 {
        self.cumulative_delta(f64::INFINITY, solution)
    }

    /// `∫ ψ dF`, which should equal `∫ τ⁻¹ dH`.
    pub fn psi_moment(&self, solution: &StieltjesSolution) -> f64 {
        self.cumulative_psi(f64::INFINITY, solution)
    }

    /// CSV with columns `lambda,delta,psi` (plus `linear_baseline` when given),
    /// restricted to grid points inside the support.
    pub fn write_csv<W: Write>(
        &self,
        out: W,
        solution: &StieltjesSolution,
        linear: Option<LinearShrinkage>,
    ) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["lambda", "delta", "psi"];
        if linear.is_some() {
            header.push("linear_baseline");
        }
        w.write_record(&header)?;
        for (i, &l) in self.lambda_grid.iter().enumerate() {
            if !solution.in_support(l) || !solution.valid[i] {
                continue;
            }
            let mut row = vec![
                crate::fmt_float(l),
                crate::fmt_float(self.delta[i]),
                crate::fmt_float(self.psi[i]),
            ];
            if let Some(lin) = linear {
                row.push(crate::fmt_float(lin.apply(l)));
            }
            w.write_record(&row)?;
        }
        w.flush()
    }
}

/// Corrected eigenvalues, paired to the input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrunkSpectrum {
    pub values: Vec<f64>,
    /// Set where the input lay outside the computed support and the correction
    /// was taken at the nearest support point.
    pub outside_support: Vec<bool>,
}

fn zero_threshold(eigs: &[f64]) -> f64 {
    ZERO_RELATIVE_THRESHOLD * eigs.iter().copied().fold(0.0, f64::max)
}

fn check_eigenvalues(eigs: &[f64]) -> Result<()> {
    if eigs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite sample eigenvalue".into(),
        ));
    }
    Ok(())
}

/// Divides each positive sample eigenvalue by `|1 − γ⁻¹ − γ⁻¹ λ_i m̆_F(λ_i)|²`;
/// zero eigenvalues become `δ(0)` when `γ < 1`.
pub fn shrink_spectrum(eigs: &[f64], solution: &StieltjesSolution) -> Result<ShrunkSpectrum> {
    check_gamma_not_one(solution.gamma)?;
    check_eigenvalues(eigs)?;
    let thr = zero_threshold(eigs);
    let d0 = delta_zero(solution);
    let mut values = Vec::with_capacity(eigs.len());
    let mut outside = Vec::with_capacity(eigs.len());
    for &l in eigs {
        if l <= thr {
            if let Some(d0) = d0 {
                values.push(d0);
                outside.push(false);
                continue;
            }
        }
        let at = solution.nearest_in_support(l);
        let flagged = at != l;
        let factor = solution.correction_term(at)?.norm_sqr();
        values.push(l.max(0.0) / factor);
        outside.push(flagged);
    }
    Ok(ShrunkSpectrum {
        values,
        outside_support: outside,
    })
}

/// Multiplies each `λ_i⁻¹` by `1 − γ⁻¹ − 2 γ⁻¹ λ_i Re m̆_F(λ_i)`; zero
/// eigenvalues become `ψ(0)` when `γ < 1`.
pub fn shrink_inverse_spectrum(
    eigs: &[f64],
    solution: &StieltjesSolution,
) -> Result<ShrunkSpectrum> {
    check_gamma_not_one(solution.gamma)?;
    check_eigenvalues(eigs)?;
    let thr = zero_threshold(eigs);
    let p0 = psi_zero(solution);
    let c = solution.concentration();
    let mut values = Vec::with_capacity(eigs.len());
    let mut outside = Vec::with_capacity(eigs.len());
    for &l in eigs {
        if l <= thr {
            match p0 {
                Some(p0) => {
                    values.push(p0);
                    outside.push(false);
                }
                None => {
                    values.push(0.0);
                    outside.push(true);
                }
            }
            continue;
        }
        let at = solution.nearest_in_support(l);
        let m = solution.m_breve_at(at)?;
        values.push((1.0 - c - 2.0 * c * at * m.re) / l);
        outside.push(at != l);
    }
    Ok(ShrunkSpectrum {
        values,
        outside_support: outside,
    })
}

/// Traces of the (oracle) population matrix needed by the linear projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    /// `Tr Σ_N`.
    pub trace_sigma: f64,
    /// `Tr(S_N Σ_N)`.
    pub trace_s_sigma: f64,
}

impl TraceStats {
    /// From sample eigenvalues and the matching `d̃_i = u_i* Σ u_i`.
    pub fn from_dtilde(eigs: &[f64], dtilde: &[f64]) -> Self {
        Self {
            trace_sigma: dtilde.iter().sum(),
            trace_s_sigma: eigs.iter().zip(dtilde).map(|(l, d)| l * d).sum(),
        }
    }
}

/// `λ ↦ intercept + slope · λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearShrinkage {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearShrinkage {
    pub fn apply(&self, lambda: f64) -> f64 {
        self.intercept + self.slope * lambda
    }
}

/// Frobenius projection of `Σ_N` onto `span{I, S_N}`.
///
/// When `S_N` is a multiple of the identity the span collapses to `span{I}`
/// and the projection is `(Tr Σ_N / N) I`.
pub fn linear_projection(eigs: &[f64], stats: TraceStats) -> Result<LinearShrinkage> {
    if eigs.is_empty() {
        return Err(Error::DegenerateSpan("no sample eigenvalues".into()));
    }
    check_eigenvalues(eigs)?;
    let n = eigs.len() as f64;
    let mean = eigs.iter().sum::<f64>() / n;
    let var = eigs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    let mean_sigma = stats.trace_sigma / n;
    if var <= 1e-14 * mean.abs().max(f64::MIN_POSITIVE).powi(2) {
        return Ok(LinearShrinkage {
            intercept: mean_sigma,
            slope: 0.0,
        });
    }
    let cov = stats.trace_s_sigma / n - mean * mean_sigma;
    let slope = cov / var;
    Ok(LinearShrinkage {
        intercept: mean_sigma - slope * mean,
        slope,
    })
}

/// Eigenvalues of the oracle linear shrinkage `a I + b S_N`.
pub fn linear_shrinkage_oracle(eigs: &[f64], stats: TraceStats) -> Result<Vec<f64>> {
    let lin = linear_projection(eigs, stats)?;
    Ok(eigs.iter().map(|&l| lin.apply(l)).collect())
}

/// Large-dimensional limit of the oracle linear projection, from the moments
/// of `F` and `∫ λ δ(λ) dF`.
pub fn limiting_linear_baseline(
    curve: &ShrinkageCurve,
    solution: &StieltjesSolution,
) -> LinearShrinkage {
    let grid = &solution.grid;
    let lam: Vec<f64> = grid.clone();
    let lam2: Vec<f64> = grid.iter().map(|l| l * l).collect();
    let lam_delta: Vec<f64> = grid.iter().zip(&curve.delta).map(|(l, d)| l * d).collect();
    let mass = solution.total_mass();
    let m1 = solution.integrate_density_weighted(&lam, f64::INFINITY) / mass;
    let m2 = solution.integrate_density_weighted(&lam2, f64::INFINITY) / mass;
    let mean_sigma = curve.delta_moment(solution) / mass;
    let cross = solution.integrate_density_weighted(&lam_delta, f64::INFINITY) / mass;
    let var = m2 - m1 * m1;
    let slope = (cross - m1 * mean_sigma) / var;
    LinearShrinkage {
        intercept: mean_sigma - slope * m1,
        slope,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::PopulationSpectrum;

    fn three_atoms() -> PopulationSpectrum {
        PopulationSpectrum::from_atoms(&[(0.2, 1.0), (0.4, 3.0), (0.4, 10.0)]).unwrap()
    }

    fn interior(sol: &StieltjesSolution, count: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for &(a, b) in &sol.support {
            let (lo, hi) = (a + 0.01, b - 0.01);
            for i in 0..count {
                out.push(lo + (hi - lo) * i as f64 / (count - 1) as f64);
            }
        }
        out
    }

    #[test]
    fn identity_population_gives_unit_corrections() {
        let sol =
            StieltjesSolution::compute(&PopulationSpectrum::point_mass(1.0).unwrap(), 2.0).unwrap();
        for l in interior(&sol, 30) {
            assert!((delta(l, &sol).unwrap() - 1.0).abs() <= 1e-6);
            assert!((psi(l, &sol).unwrap() - 1.0).abs() <= 1e-6);
        }
        assert_eq!(delta(-0.5, &sol).unwrap(), 0.0);
        assert_eq!(psi(-1.0, &sol).unwrap(), 0.0);
    }

    #[test]
    fn scaled_point_mass() {
        let sol = StieltjesSolution::compute(&PopulationSpectrum::point_mass(3.0).unwrap(), 10.0)
            .unwrap();
        for l in interior(&sol, 20) {
            assert!((delta(l, &sol).unwrap() - 3.0).abs() <= 1e-6);
            assert!((psi(l, &sol).unwrap() - 1.0 / 3.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_branch_values() {
        let sol =
            StieltjesSolution::compute(&PopulationSpectrum::point_mass(1.0).unwrap(), 0.5).unwrap();
        // m̆_F̲(0) = 1, m̆_H(0) = 1
        assert!((delta(0.0, &sol).unwrap() - 1.0).abs() <= 1e-12);
        assert!((psi(0.0, &sol).unwrap() - 1.0).abs() <= 1e-12);
        let curve = ShrinkageCurve::from_solution(&sol).unwrap();
        assert!((curve.psi_moment(&sol) - 1.0).abs() <= 1e-3);
        assert!((curve.delta_moment(&sol) - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn moment_conservation_three_atoms() {
        let spec = three_atoms();
        for gamma in [0.5, 2.0, 10.0] {
            let sol = StieltjesSolution::compute(&spec, gamma).unwrap();
            let curve = ShrinkageCurve::from_solution(&sol).unwrap();
            assert!(
                (curve.delta_moment(&sol) - 5.4).abs() <= 1e-3,
                "gamma={gamma}"
            );
            assert!(
                (curve.psi_moment(&sol) - spec.m_h_at_zero()).abs() <= 1e-3,
                "gamma={gamma}"
            );
            assert!(curve
                .delta
                .iter()
                .zip(&sol.grid)
                .filter(|(_, &l)| sol.in_support(l))
                .all(|(&d, _)| d > 0.0));
        }
    }

    #[test]
    fn zero_inputs_map_to_delta_zero() {
        let sol =
            StieltjesSolution::compute(&PopulationSpectrum::point_mass(2.0).unwrap(), 0.5).unwrap();
        let out = shrink_spectrum(&[0.0, 0.0, 0.0], &sol).unwrap();
        let d0 = delta_zero(&sol).unwrap();
        assert!(out.values.iter().all(|&v| v == d0));
        let out = shrink_inverse_spectrum(&[0.0, 0.0], &sol).unwrap();
        let p0 = psi_zero(&sol).unwrap();
        assert!(out.values.iter().all(|&v| v == p0));
    }

    #[test]
    fn inverse_shrinkage_is_not_reciprocal() {
        let sol = StieltjesSolution::compute(&three_atoms(), 2.0).unwrap();
        let eigs: Vec<f64> = interior(&sol, 10);
        let direct = shrink_spectrum(&eigs, &sol).unwrap();
        let inverse = shrink_inverse_spectrum(&eigs, &sol).unwrap();
        let gap = direct
            .values
            .iter()
            .zip(&inverse.values)
            .map(|(d, p)| ((1.0 / d) - p).abs() / p.abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-3);
    }

    #[test]
    fn outside_support_is_flagged() {
        let sol =
            StieltjesSolution::compute(&PopulationSpectrum::point_mass(1.0).unwrap(), 2.0).unwrap();
        let top = sol.upper_edge().unwrap();
        let out = shrink_spectrum(&[1.0, top + 0.2], &sol).unwrap();
        assert_eq!(out.outside_support, vec![false, true]);
        assert!(out.values.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn linear_projection_examples() {
        // Σ = I, S = I
        let eigs = [1.0; 4];
        let stats = TraceStats::from_dtilde(&eigs, &[1.0; 4]);
        assert_eq!(linear_shrinkage_oracle(&eigs, stats).unwrap(), vec![1.0; 4]);
        // S = Σ: d̃_i = λ_i
        let eigs = [4.0, 2.0, 1.0, 0.5];
        let stats = TraceStats::from_dtilde(&eigs, &eigs);
        let out = linear_shrinkage_oracle(&eigs, stats).unwrap();
        for (o, e) in out.iter().zip(&eigs) {
            assert!((o - e).abs() <= 1e-12);
        }
        assert!(matches!(
            linear_projection(&[], stats),
            Err(Error::DegenerateSpan(_))
        ));
    }

    #[test]
    fn limiting_linear_baseline_matches_moments() {
        // ∫λ dF = m1, ∫λ² dF = m2 + γ⁻¹ m1², ∫λδ dF = m2
        let spec = three_atoms();
        let gamma = 2.0;
        let sol = StieltjesSolution::compute(&spec, gamma).unwrap();
        let curve = ShrinkageCurve::from_solution(&sol).unwrap();
        let lin = limiting_linear_baseline(&curve, &sol);
        let (m1, m2) = (spec.moment(1), spec.moment(2));
        let slope = (m2 - m1 * m1) / (m2 + m1 * m1 / gamma - m1 * m1);
        let intercept = m1 * (1.0 - slope);
        assert!(
            (lin.slope - slope).abs() <= 1e-3,
            "{} vs {slope}",
            lin.slope
        );
        assert!((lin.intercept - intercept).abs() <= 1e-2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::sync::OnceLock;

        fn solution() -> &'static StieltjesSolution {
            static SOL: OnceLock<StieltjesSolution> = OnceLock::new();
            SOL.get_or_init(|| StieltjesSolution::compute(&three_atoms(), 2.0).unwrap())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn delta_nonnegative(l in -5.0f64..30.0) {
                let d = delta(l, solution()).unwrap();
                prop_assert!(d >= 0.0);
                if l < 0.0 {
                    prop_assert_eq!(d, 0.0);
                    prop_assert_eq!(psi(l, solution()).unwrap(), 0.0);
                }
            }

            #[test]
            fn shrunk_values_are_positive_and_paired(eigs in prop::collection::vec(0.01f64..40.0, 1..20)) {
                let out = shrink_spectrum(&eigs, solution()).unwrap();
                prop_assert_eq!(out.values.len(), eigs.len());
                prop_assert!(out.values.iter().all(|v| v.is_finite() && *v > 0.0));
                for (l, flag) in eigs.iter().zip(&out.outside_support) {
                    prop_assert_eq!(*flag, !solution().in_support(*l));
                }
            }
        }
    }
}
