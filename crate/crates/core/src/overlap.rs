//! Limiting overlap between sample and population eigenvectors.
//!
//! `φ(l, t)` is the limiting density of `N |u_i* v_j|²` when the sample
//! eigenvalue of `u_i` is near `l` and the population eigenvalue of `v_j` is
//! near `t`:
//!
//! ```text
//! φ(l, t) = γ⁻¹ l t / ((a t − l)² + b² t²)        l > 0
//!         = 1 / ((1 − γ) (1 + m̆_F̲(0) t))          l = 0, γ < 1
//!         = 0                                      otherwise
//! ```
//!
//! with `a + i b = 1 − γ⁻¹ − γ⁻¹ l m̆_F(l)`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stieltjes::{check_gamma_not_one, density_at, StieltjesSolution};

/// Allowed gap between `Im(1 − γ⁻¹ − γ⁻¹ l m̆_F(l))` and `−π γ⁻¹ l F′(l)`.
pub const B_CONSISTENCY_TOLERANCE: f64 = 1e-6;

/// Real and imaginary parts of `1 − γ⁻¹ − γ⁻¹ l m̆_F(l)` at one `l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelCoefficients {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

pub fn kernel_coefficients(l: f64, solution: &StieltjesSolution) -> Result<KernelCoefficients> {
    let c = solution.concentration();
    let m = solution.m_breve_at(l)?;
    Ok(KernelCoefficients {
        l,
        a: 1.0 - c - c * l * m.re,
        b: -c * l * m.im,
    })
}

/// `|b − (−π γ⁻¹ l F′(l))|` with `F′(l)` from an independent direct solve at
/// `l`; values above [`B_CONSISTENCY_TOLERANCE`] point at a solver fault.
pub fn b_discrepancy(l: f64, solution: &StieltjesSolution) -> Result<f64> {
    let coef = kernel_coefficients(l, solution)?;
    let density = density_at(&solution.spectrum, solution.gamma, l)?;
    let b_from_density = -std::f64::consts::PI * solution.concentration() * l * density;
    Ok((coef.b - b_from_density).abs())
}

fn phi_positive(coef: &KernelCoefficients, t: f64, c: f64) -> f64 {
    let l = coef.l;
    let r = coef.a * t - l;
    c * l * t / (r * r + coef.b * coef.b * t * t)
}

fn phi_zero(solution: &StieltjesSolution, t: f64) -> Result<f64> {
    match solution.m_under_zero {
        Some(mu) if solution.gamma < 1.0 => Ok(1.0 / ((1.0 - solution.gamma) * (1.0 + mu * t))),
        _ => Err(Error::ZeroBranchUnavailable(solution.gamma)),
    }
}

/// `φ(l, t)`.
pub fn phi(l: f64, t: f64, solution: &StieltjesSolution) -> Result<f64> {
    check_gamma_not_one(solution.gamma)?;
    if l > 0.0 {
        let coef = kernel_coefficients(l, solution)?;
        Ok(phi_positive(&coef, t, solution.concentration()))
    } else if l == 0.0 {
        phi_zero(solution, t)
    } else {
        Ok(0.0)
    }
}

/// `∫ φ(l, t) dH(t)`; equals one for `l` inside the support.
pub fn normalization(l: f64, solution: &StieltjesSolution) -> Result<f64> {
    check_gamma_not_one(solution.gamma)?;
    let spec = &solution.spectrum;
    if l > 0.0 {
        let coef = kernel_coefficients(l, solution)?;
        let c = solution.concentration();
        Ok(spec.integrate(|t| phi_positive(&coef, t, c)))
    } else if l == 0.0 {
        let mu = solution
            .m_under_zero
            .ok_or(Error::ZeroBranchUnavailable(solution.gamma))?;
        Ok(spec.integrate(|t| 1.0 / (1.0 + mu * t)) / (1.0 - solution.gamma))
    } else {
        Ok(0.0)
    }
}

/// Sampled kernel `φ(l, t)` over a rectangular grid.
#[derive(Debug, Clone)]
pub struct OverlapKernel {
    pub l_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    /// `values[i][j] = φ(l_grid[i], t_grid[j])`.
    pub values: Vec<Vec<f64>>,
    pub gamma: f64,
    /// `(a, b)` per `l`; `(NaN, NaN)` at `l ≤ 0`.
    pub a_b: Vec<(f64, f64)>,
    /// [`b_discrepancy`] per `l`; zero at `l ≤ 0`.
    pub b_discrepancy: Vec<f64>,
}

impl OverlapKernel {
    pub fn evaluate(solution: &StieltjesSolution, l_grid: &[f64], t_grid: &[f64]) -> Result<Self> {
        check_gamma_not_one(solution.gamma)?;
        type Row = (Vec<f64>, (f64, f64), f64);
        let rows: Vec<Row> = l_grid
            .par_iter()
            .map(|&l| -> Result<Row> {
                if l > 0.0 {
                    let coef = kernel_coefficients(l, solution)?;
                    let c = solution.concentration();
                    let row = t_grid.iter().map(|&t| phi_positive(&coef, t, c)).collect();
                    Ok((row, (coef.a, coef.b), b_discrepancy(l, solution)?))
                } else {
                    let row = t_grid
                        .iter()
                        .map(|&t| phi(l, t, solution))
                        .collect::<Result<Vec<f64>>>()?;
                    Ok((row, (f64::NAN, f64::NAN), 0.0))
                }
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(rows.len());
        let mut a_b = Vec::with_capacity(rows.len());
        let mut b_discrepancy = Vec::with_capacity(rows.len());
        for (row, ab, gap) in rows {
            values.push(row);
            a_b.push(ab);
            b_discrepancy.push(gap);
        }
        Ok(Self {
            l_grid: l_grid.to_vec(),
            t_grid: t_grid.to_vec(),
            values,
            gamma: solution.gamma,
            a_b,
            b_discrepancy,
        })
    }

    /// CSV with columns `l,t,phi`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["l", "t", "phi"])?;
        for (i, &l) in self.l_grid.iter().enumerate() {
            for (j, &t) in self.t_grid.iter().enumerate() {
                w.write_record([
                    crate::fmt_float(l),
                    crate::fmt_float(t),
                    crate::fmt_float(self.values[i][j]),
                ])?;
            }
        }
        w.flush()
    }
}

/// `∫_{t ≤ τ} φ(l_i, t) dH(t)` for every grid point `l_i` of the solution.
fn inner_integrals(solution: &StieltjesSolution, tau: f64) -> Vec<f64> {
    let c = solution.concentration();
    let spec = &solution.spectrum;
    solution
        .grid
        .par_iter()
        .zip(solution.m_breve.par_iter())
        .zip(solution.valid.par_iter())
        .map(|((&l, &m), &ok)| {
            if !ok {
                return 0.0;
            }
            let coef = KernelCoefficients {
                l,
                a: 1.0 - c - c * l * m.re,
                b: -c * l * m.im,
            };
            spec.integrate_up_to(|t| phi_positive(&coef, t, c), tau)
        })
        .collect()
}

fn zero_atom(solution: &StieltjesSolution, tau: f64) -> f64 {
    match solution.m_under_zero {
        Some(mu) if solution.gamma < 1.0 => {
            // (1 − γ) φ(0, t) = 1 / (1 + m̆_F̲(0) t)
            solution
                .spectrum
                .integrate_up_to(|t| 1.0 / (1.0 + mu * t), tau)
        }
        _ => 0.0,
    }
}

/// `Φ(λ, τ) = ∫_{l ≤ λ} ∫_{t ≤ τ} φ(l, t) dH(t) dF(l)`.
pub fn phi_cumulative(lambda: f64, tau: f64, solution: &StieltjesSolution) -> Result<f64> {
    check_gamma_not_one(solution.gamma)?;
    if lambda < 0.0 || tau < solution.spectrum.h1() {
        return Ok(0.0);
    }
    let inner = inner_integrals(solution, tau);
    Ok(zero_atom(solution, tau) + solution.integrate_density_weighted(&inner, lambda))
}

/// `Φ` on a rectangular `(λ, τ)` grid; `table[i][j] = Φ(lambdas[i], taus[j])`.
pub fn phi_cumulative_table(
    solution: &StieltjesSolution,
    lambdas: &[f64],
    taus: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_gamma_not_one(solution.gamma)?;
    let mut table = vec![vec![0.0; taus.len()]; lambdas.len()];
    for (j, &tau) in taus.iter().enumerate() {
        if tau < solution.spectrum.h1() {
            continue;
        }
        let inner = inner_integrals(solution, tau);
        let atom = zero_atom(solution, tau);
        for (i, &lambda) in lambdas.iter().enumerate() {
            if lambda >= 0.0 {
                table[i][j] = atom + solution.integrate_density_weighted(&inner, lambda);
            }
        }
    }
    Ok(table)
}

/// CSV with columns `lambda,tau,Phi`.
pub fn write_cumulative_csv<W: Write>(
    out: W,
    lambdas: &[f64],
    taus: &[f64],
    table: &[Vec<f64>],
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "tau", "Phi"])?;
    for (i, &l) in lambdas.iter().enumerate() {
        for (j, &t) in taus.iter().enumerate() {
            w.write_record([
                crate::fmt_float(l),
                crate::fmt_float(t),
                crate::fmt_float(table[i][j]),
            ])?;
        }
    }
    w.flush()
}

/// Limiting mean of `N |u_i* v_j|²` over sample eigenvalues in
/// `[λ_lo, λ_hi]` and population eigenvalues in `[τ_lo, τ_hi]`.
pub fn average_overlap(
    lambda_lo: f64,
    lambda_hi: f64,
    tau_lo: f64,
    tau_hi: f64,
    solution: &StieltjesSolution,
) -> Result<f64> {
    check_gamma_not_one(solution.gamma)?;
    let f_mass = solution.cdf(lambda_hi) - solution.cdf(lambda_lo);
    if f_mass <= 1e-12 {
        return Err(Error::EmptyBin(f_mass));
    }
    let h_mass = solution.spectrum.cdf(tau_hi) - solution.spectrum.cdf(tau_lo);
    if h_mass <= 1e-12 {
        return Err(Error::EmptyBin(h_mass));
    }
    let table = phi_cumulative_table(solution, &[lambda_lo, lambda_hi], &[tau_lo, tau_hi])?;
    let num = table[1][1] - table[1][0] - table[0][1] + table[0][0];
    Ok(num / (f_mass * h_mass))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::PopulationSpectrum;

    fn dirac_solution(gamma: f64) -> StieltjesSolution {
        StieltjesSolution::compute(&PopulationSpectrum::point_mass(1.0).unwrap(), gamma).unwrap()
    }

    fn interior(sol: &StieltjesSolution, count: usize) -> Vec<f64> {
        let (lo, hi) = (
            sol.lower_edge().unwrap() + 0.01,
            sol.upper_edge().unwrap() - 0.01,
        );
        (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .filter(|&l| sol.in_support(l))
            .collect()
    }

    #[test]
    fn point_mass_kernel_is_one() {
        let sol = dirac_solution(2.0);
        for l in interior(&sol, 25) {
            assert!((phi(l, 1.0, &sol).unwrap() - 1.0).abs() <= 1e-6, "l={l}");
        }
        assert_eq!(phi(-1.0, 1.0, &sol).unwrap(), 0.0);
        assert_eq!(
            phi(0.0, 1.0, &sol).unwrap_err(),
            Error::ZeroBranchUnavailable(2.0)
        );
    }

    #[test]
    fn zero_branch_normalizes() {
        let sol = dirac_solution(0.5);
        // m̆_F̲(0) = 1 → φ(0, 1) = 1 / (0.5 · 2)
        assert!((phi(0.0, 1.0, &sol).unwrap() - 1.0).abs() <= 1e-12);
        assert!((normalization(0.0, &sol).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn b_agrees_with_density() {
        let spec = PopulationSpectrum::from_atoms(&[(0.2, 1.0), (0.4, 3.0), (0.4, 10.0)]).unwrap();
        let sol = StieltjesSolution::compute(&spec, 2.0).unwrap();
        for l in interior(&sol, 40) {
            let gap = b_discrepancy(l, &sol).unwrap();
            assert!(gap <= B_CONSISTENCY_TOLERANCE, "l={l} gap={gap}");
        }
    }

    #[test]
    fn cumulative_limits() {
        let sol = dirac_solution(2.0);
        let top = sol.upper_edge().unwrap();
        assert!((phi_cumulative(1e9, 1e9, &sol).unwrap() - 1.0).abs() <= 2e-3);
        assert_eq!(phi_cumulative(top, 0.5, &sol).unwrap(), 0.0);
        assert!((phi_cumulative(top, 1.0, &sol).unwrap() - sol.cdf(top)).abs() <= 2e-3);
        assert!((sol.cdf(top) - 1.0).abs() <= 2e-3);
    }

    #[test]
    fn average_overlap_of_full_ranges() {
        let spec = PopulationSpectrum::from_atoms(&[(0.2, 1.0), (0.4, 3.0), (0.4, 10.0)]).unwrap();
        let sol = StieltjesSolution::compute(&spec, 2.0).unwrap();
        let v = average_overlap(0.0, 1e9, 0.0, 1e9, &sol).unwrap();
        assert!((v - 1.0).abs() <= 3e-3);
        assert!(matches!(
            average_overlap(0.0, 1e9, 4.0, 5.0, &sol),
            Err(Error::EmptyBin(_))
        ));

        let dirac = dirac_solution(2.0);
        let v = average_overlap(0.5, 1.5, 0.5, 1.5, &dirac).unwrap();
        assert!((v - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn kernel_grid_csv() {
        let sol = dirac_solution(2.0);
        let k = OverlapKernel::evaluate(&sol, &[0.5, 1.0], &[1.0]).unwrap();
        assert_eq!(k.values.len(), 2);
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("l,t,phi\n"));
    }
}
