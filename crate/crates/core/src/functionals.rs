//! Generalized Marchenko-Pastur functionals
//!
//! ```text
//! Θ^g(z) = ∫ {τ[1 − γ⁻¹ − γ⁻¹ z m_F(z)] − z}⁻¹ g(τ) dH(τ)
//! ```
//!
//! the limit of `N⁻¹ Tr[(S_N − zI)⁻¹ g(Σ_N)]`, together with the closed forms
//! for `g(τ) = τ`, `τ^k` and `1/τ`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectrum::PopulationSpectrum;
use crate::stieltjes::solve_mf;

/// Largest power accepted by [`theta_k`].
pub const MAX_POWER: u32 = 12;

/// Bounded weight `g` on `[h1, h2]` with finitely many discontinuities.
#[derive(Clone)]
pub struct WeightFunction {
    evaluator: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    discontinuities: Vec<f64>,
}

impl fmt::Debug for WeightFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightFunction")
            .field("discontinuities", &self.discontinuities)
            .finish_non_exhaustive()
    }
}

impl WeightFunction {
    pub fn new<F>(evaluator: F, discontinuities: Vec<f64>) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            evaluator: Arc::new(evaluator),
            discontinuities,
        }
    }

    pub fn continuous<F>(evaluator: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::new(evaluator, Vec::new())
    }

    /// `g ≡ 1`.
    pub fn flat() -> Self {
        Self::continuous(|_| 1.0)
    }

    /// `g(τ) = τ^k`.
    pub fn power(k: i32) -> Self {
        Self::continuous(move |t| t.powi(k))
    }

    /// `g = 1_{(−∞, x)}`.
    pub fn indicator_below(x: f64) -> Self {
        Self::new(move |t| if t < x { 1.0 } else { 0.0 }, vec![x])
    }

    /// `α g₁ + β g₂`.
    pub fn combine(alpha: f64, g1: &WeightFunction, beta: f64, g2: &WeightFunction) -> Self {
        let (f1, f2) = (g1.evaluator.clone(), g2.evaluator.clone());
        let mut disc = g1.discontinuities.clone();
        disc.extend_from_slice(&g2.discontinuities);
        Self::new(move |t| alpha * f1(t) + beta * f2(t), disc)
    }

    pub fn eval(&self, t: f64) -> f64 {
        (self.evaluator)(t)
    }

    pub fn discontinuities(&self) -> &[f64] {
        &self.discontinuities
    }
}

/// `Θ^g(z)` given an already solved `m_F(z)`.
pub fn theta_g_with_mf(
    z: Complex64,
    m: Complex64,
    g: &WeightFunction,
    spec: &PopulationSpectrum,
    gamma: f64,
) -> Complex64 {
    let c = 1.0 / gamma;
    let a = 1.0 - c - c * z * m;
    spec.integrate_split(|t| (a * t - z).inv() * g.eval(t), g.discontinuities())
}

pub fn theta_g(
    z: Complex64,
    g: &WeightFunction,
    spec: &PopulationSpectrum,
    gamma: f64,
) -> Result<Complex64> {
    let m = solve_mf(z, spec, gamma)?;
    Ok(theta_g_with_mf(z, m, g, spec, gamma))
}

fn theta_1_from_mf(z: Complex64, m: Complex64, gamma: f64) -> Result<Complex64> {
    let d = gamma - 1.0 - z * m;
    if d.norm() < 1e-14 {
        return Err(Error::DegenerateDenominator(d.norm()));
    }
    Ok(gamma * gamma / d - gamma)
}

/// `Θ^(1)(z) = γ² / (γ − 1 − z m_F(z)) − γ`.
pub fn theta_1(z: Complex64, spec: &PopulationSpectrum, gamma: f64) -> Result<Complex64> {
    let m = solve_mf(z, spec, gamma)?;
    theta_1_from_mf(z, m, gamma)
}

/// `Θ^(k)` from `Θ^(k+1) = [z Θ^(k) + ∫τ^k dH] [1 + γ⁻¹ Θ^(1)]`, seeded with
/// `Θ^(0) = m_F`.
pub fn theta_k(z: Complex64, k: u32, spec: &PopulationSpectrum, gamma: f64) -> Result<Complex64> {
    if k == 0 || k > MAX_POWER {
        return Err(Error::InvalidArgument(format!(
            "theta_k needs 1 <= k <= {MAX_POWER}, got {k}"
        )));
    }
    let m = solve_mf(z, spec, gamma)?;
    let t1 = theta_1_from_mf(z, m, gamma)?;
    let factor = 1.0 + t1 / gamma;
    let mut current = t1;
    for j in 1..k {
        current = (z * current + spec.moment(j as i32)) * factor;
    }
    Ok(current)
}

/// `Θ^(−1)(z) = m_F(z)/z · [1 − γ⁻¹ − γ⁻¹ z m_F(z)] − z⁻¹ ∫ τ⁻¹ dH(τ)`.
pub fn theta_inv(z: Complex64, spec: &PopulationSpectrum, gamma: f64) -> Result<Complex64> {
    let m = solve_mf(z, spec, gamma)?;
    let c = 1.0 / gamma;
    Ok(m / z * (1.0 - c - c * z * m) - spec.m_h_at_zero() / z)
}
