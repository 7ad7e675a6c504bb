//! Marchenko-Pastur self-consistency solver.
//!
//! For `z` in the upper half plane, `m_F(z)` is the unique solution with
//! `Im m > 0` of
//!
//! ```text
//! m = ∫ { τ [1 − γ⁻¹ − γ⁻¹ z m] − z }⁻¹ dH(τ)
//! ```
//!
//! Far from the real axis a damped fixed-point iteration seeded with `−1/z`
//! converges quickly. Closer to the axis its contraction factor tends to one,
//! so the solver walks `Im z` down geometrically and runs Newton steps from
//! the previous solution. Boundary values `m̆_F(λ)` are obtained by
//! Richardson extrapolation over a short `η` schedule followed by a Newton
//! polish of the same equation at `z = λ`.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp;
use crate::spectrum::PopulationSpectrum;

pub const FIXED_POINT_DAMPING: f64 = 0.5;
pub const MAX_FIXED_POINT_ITERATIONS: usize = 10_000;
/// Residual tolerance, relative to `max(1, |m|)`.
pub const TOLERANCE: f64 = 1e-12;
/// Imaginary offsets used for the boundary-value extrapolation (for `λ ≥ 1`;
/// smaller `λ` scale the schedule by `λ`).
pub const ETA_SCHEDULE: [f64; 3] = [1e-4, 5e-5, 2.5e-5];
/// Density level separating support from its complement.
pub const EDGE_THRESHOLD: f64 = 1e-8;
/// Absolute resolution of refined support edges.
pub const EDGE_RESOLUTION: f64 = 1e-6;
pub const DEFAULT_GRID_POINTS: usize = 6000;
/// Distance to a support edge, in interpolation stencils, below which
/// [`StieltjesSolution::m_breve_at`] solves directly.
pub const EDGE_GUARD_CELLS: f64 = 10.0;

const MAX_NEWTON_ITERATIONS: usize = 60;
const MAX_CONTINUATION_STEPS: usize = 2_000;

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "aspect ratio must be positive and finite, got {gamma}"
        )));
    }
    Ok(())
}

pub(crate) fn check_gamma_not_one(gamma: f64) -> Result<()> {
    check_gamma(gamma)?;
    if (gamma - 1.0).abs() < 1e-12 {
        return Err(Error::GammaOne);
    }
    Ok(())
}

#[derive(Clone, Copy, Default)]
struct Pair(Complex64, Complex64);

impl std::ops::Add for Pair {
    type Output = Pair;
    fn add(self, o: Pair) -> Pair {
        Pair(self.0 + o.0, self.1 + o.1)
    }
}

impl std::ops::Mul<f64> for Pair {
    type Output = Pair;
    fn mul(self, w: f64) -> Pair {
        Pair(self.0 * w, self.1 * w)
    }
}

/// Which self-consistency equation is being solved.
#[derive(Clone, Copy)]
enum Equation {
    /// `m = ∫ {τ[1 − c − c z m] − z}⁻¹ dH`, `c = γ⁻¹`.
    Sample,
    /// Companion transform of the `p × p` matrix: `m = −{z − c ∫ τ/(1+τm) dH}⁻¹`.
    Companion,
}

struct Map<'a> {
    spec: &'a PopulationSpectrum,
    c: f64,
    equation: Equation,
}

impl Map<'_> {
    /// Right-hand side of the fixed-point equation and its derivative in `m`.
    fn eval(&self, z: Complex64, m: Complex64) -> (Complex64, Complex64) {
        let c = self.c;
        match self.equation {
            Equation::Sample => {
                let a = 1.0 - c - c * z * m;
                let Pair(r, dr) = self.spec.integrate(|t| {
                    let inv = (a * t - z).inv();
                    Pair(inv, inv * inv * (c * t) * z)
                });
                (r, dr)
            }
            Equation::Companion => {
                let Pair(i, di) = self.spec.integrate(|t| {
                    let inv = (1.0 + m * t).inv();
                    Pair(inv * t, -(inv * inv) * (t * t))
                });
                let u = z - i * c;
                let r = -u.inv();
                let dr = -(di * c) / (u * u);
                (r, dr)
            }
        }
    }

    fn residual(&self, z: Complex64, m: Complex64) -> f64 {
        (m - self.eval(z, m).0).norm()
    }

    fn scale(&self) -> f64 {
        self.spec.h2() * (1.0 + self.c.sqrt()).powi(2)
    }
}

fn rel(m: Complex64) -> f64 {
    m.norm().max(1.0)
}

fn damped_fixed_point(map: &Map, z: Complex64, m0: Complex64) -> Result<Complex64> {
    let mut m = m0;
    for it in 0..MAX_FIXED_POINT_ITERATIONS {
        let (r, _) = map.eval(z, m);
        let next = m * (1.0 - FIXED_POINT_DAMPING) + r * FIXED_POINT_DAMPING;
        let step = (next - m).norm();
        m = next;
        if !m.is_finite() {
            return Err(no_convergence(z, f64::NAN, it + 1));
        }
        if step <= TOLERANCE * rel(m) && map.residual(z, m) <= TOLERANCE * rel(m) {
            return Ok(m);
        }
    }
    Err(no_convergence(
        z,
        map.residual(z, m),
        MAX_FIXED_POINT_ITERATIONS,
    ))
}

fn no_convergence(z: Complex64, residual: f64, iterations: usize) -> Error {
    Error::NoConvergence {
        re: z.re,
        im: z.im,
        residual,
        iterations,
    }
}

/// Newton iteration on `m − R(m) = 0`. With `upper` set, leaving the set
/// `Im m > 0`, `Im zm ≥ 0` of transforms of measures on `[0, ∞)` counts as
/// failure.
fn newton(map: &Map, z: Complex64, m0: Complex64, upper: bool) -> Option<Complex64> {
    let mut m = m0;
    for _ in 0..MAX_NEWTON_ITERATIONS {
        let (r, dr) = map.eval(z, m);
        let f = m - r;
        if f.norm() <= 0.1 * TOLERANCE * rel(m) {
            return Some(m);
        }
        let step = f / (1.0 - dr);
        m -= step;
        if !m.is_finite() || (upper && !admissible(z, m)) {
            return None;
        }
        if step.norm() <= 1e-15 * rel(m) {
            let res = map.residual(z, m);
            return (res <= TOLERANCE * rel(m)).then_some(m);
        }
    }
    let res = map.residual(z, m);
    (res <= TOLERANCE * rel(m)).then_some(m)
}

fn admissible(z: Complex64, m: Complex64) -> bool {
    let zm = z * m;
    m.im > 0.0 && zm.im >= -TOLERANCE * zm.norm()
}

/// Solves the equation at `re + i·η` for every `η` of the decreasing list.
fn solve_along(map: &Map, re: f64, etas: &[f64]) -> Result<Vec<Complex64>> {
    let first = etas[0];
    let start = 4.0 * (map.scale() + re.abs() + 1.0);
    let mut eta = first.max(start);
    let z0 = Complex64::new(re, eta);
    let mut m = damped_fixed_point(map, z0, -z0.inv())?;
    if let Some(polished) = newton(map, z0, m, true) {
        m = polished;
    }

    let mut out = Vec::with_capacity(etas.len());
    let mut ratio: f64 = 0.5;
    let mut steps = 0usize;
    for &target in etas {
        while eta > target {
            steps += 1;
            let next = target.max(eta * ratio);
            let z = Complex64::new(re, next);
            match newton(map, z, m, true) {
                Some(sol) => {
                    m = sol;
                    eta = next;
                    ratio = (ratio * ratio).max(0.25);
                }
                None => {
                    ratio = ratio.sqrt();
                    if ratio > 1.0 - 1e-9 || steps > MAX_CONTINUATION_STEPS {
                        let z = Complex64::new(re, eta);
                        return Err(no_convergence(z, map.residual(z, m), steps));
                    }
                }
            }
        }
        let z = Complex64::new(re, target);
        let res = map.residual(z, m);
        if res > TOLERANCE * rel(m) {
            return Err(no_convergence(z, res, steps));
        }
        out.push(m);
    }
    Ok(out)
}

fn sample_map(spec: &PopulationSpectrum, gamma: f64) -> Map<'_> {
    Map {
        spec,
        c: 1.0 / gamma,
        equation: Equation::Sample,
    }
}

/// `m_F(z)` for `Im z > 0`.
pub fn solve_mf(z: Complex64, spec: &PopulationSpectrum, gamma: f64) -> Result<Complex64> {
    check_gamma(gamma)?;
    if !(z.im > 0.0) || !z.is_finite() {
        return Err(Error::DomainError(format!(
            "m_F requires Im z > 0, got {}+{}i",
            z.re, z.im
        )));
    }
    let map = sample_map(spec, gamma);
    Ok(solve_along(&map, z.re, &[z.im])?[0])
}

/// Residual `|m − RHS(m)|` of the Marchenko-Pastur map at `z`.
pub fn mf_residual(z: Complex64, m: Complex64, spec: &PopulationSpectrum, gamma: f64) -> f64 {
    sample_map(spec, gamma).residual(z, m)
}

/// Stieltjes transform of the companion distribution `F̲`, solved from its
/// own equation (independent of [`solve_mf`]).
pub fn solve_companion(z: Complex64, spec: &PopulationSpectrum, gamma: f64) -> Result<Complex64> {
    check_gamma(gamma)?;
    if !(z.im > 0.0) || !z.is_finite() {
        return Err(Error::DomainError(format!(
            "companion transform requires Im z > 0, got {}+{}i",
            z.re, z.im
        )));
    }
    let map = Map {
        spec,
        c: 1.0 / gamma,
        equation: Equation::Companion,
    };
    Ok(solve_along(&map, z.re, &[z.im])?[0])
}

/// `m̆_F̲(0)` for `γ < 1`: the positive root of `1/m = γ⁻¹ ∫ τ/(1+τm) dH(τ)`,
/// found by bisection.
pub fn companion_zero(spec: &PopulationSpectrum, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if gamma >= 1.0 {
        return Err(Error::DomainError(format!(
            "m̆_F̲(0) is only defined for gamma < 1, got {gamma}"
        )));
    }
    let c = 1.0 / gamma;
    // m·(1/m − c∫τ/(1+τm)dH) = 1 − c∫τm/(1+τm)dH decreases from 1 to 1 − c < 0
    let g = |m: f64| 1.0 - c * spec.integrate(|t| t * m / (1.0 + t * m));
    let mut lo = 0.0_f64;
    let mut hi = 1.0 / spec.h1();
    while g(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Residual of the scalar equation solved by [`companion_zero`].
pub fn companion_zero_residual(m: f64, spec: &PopulationSpectrum, gamma: f64) -> f64 {
    (1.0 / m - spec.integrate(|t| t / (1.0 + t * m)) / gamma).abs()
}

/// Boundary value `m̆_F(λ)` at a single real `λ > 0`.
pub fn boundary_value(spec: &PopulationSpectrum, gamma: f64, lambda: f64) -> Result<Complex64> {
    check_gamma(gamma)?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::DomainError(format!(
            "boundary values need lambda > 0, got {lambda}"
        )));
    }
    let map = sample_map(spec, gamma);
    let shrink = lambda.min(1.0);
    let etas: Vec<f64> = ETA_SCHEDULE.iter().map(|e| e * shrink).collect();
    let f = solve_along(&map, lambda, &etas)?;

    // η, η/2, η/4 → eliminate the O(η) and O(η²) terms
    let r1a = f[1] * 2.0 - f[0];
    let r1b = f[2] * 2.0 - f[1];
    let estimate = (r1b * 4.0 - r1a) / 3.0;

    let z = Complex64::new(lambda, 0.0);
    let mut m = match newton(&map, z, estimate, false) {
        Some(p) if p.im > -1e-10 && (p - estimate).norm() <= 0.05 * (1.0 + estimate.norm()) => p,
        _ => estimate,
    };
    if m.im < 0.0 {
        m.im = 0.0;
    }
    Ok(m)
}

/// Density `F′(λ) = π⁻¹ Im m̆_F(λ)` evaluated directly.
pub fn density_at(spec: &PopulationSpectrum, gamma: f64, lambda: f64) -> Result<f64> {
    Ok(boundary_value(spec, gamma, lambda)?.im / std::f64::consts::PI)
}

/// Grid covering the whole support: from half the lower support bound
/// `h1 (1 − γ^{−1/2})²` up to 5% past the upper bound `h2 (1 + γ^{−1/2})²`.
pub fn default_grid(spec: &PopulationSpectrum, gamma: f64, points: usize) -> Vec<f64> {
    let sc = (1.0 / gamma).sqrt();
    let lo = 0.5 * spec.h1() * (1.0 - sc).powi(2);
    let hi = 1.05 * spec.h2() * (1.0 + sc).powi(2);
    let lo = if lo > 0.0 { lo } else { 1e-3 * hi };
    let points = points.max(2);
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Tabulated boundary values of `m_F` for a fixed `(H, γ)`.
#[derive(Debug, Clone)]
pub struct StieltjesSolution {
    pub spectrum: PopulationSpectrum,
    pub gamma: f64,
    pub grid: Vec<f64>,
    pub m_breve: Vec<Complex64>,
    pub density: Vec<f64>,
    /// `false` where the solver failed; such entries hold NaN.
    pub valid: Vec<bool>,
    /// Disjoint closed intervals carrying density.
    pub support: Vec<(f64, f64)>,
    /// `m̆_F̲(0)`, present iff `γ < 1`.
    pub m_under_zero: Option<f64>,
    pub mass_at_zero: f64,
}

/// Evaluates `m̆_F` over an ascending grid of positive values.
///
/// A failing grid point is marked invalid instead of aborting; the support is
/// the set of maximal runs of valid points whose density exceeds
/// [`EDGE_THRESHOLD`].
pub fn boundary_values(
    spec: &PopulationSpectrum,
    gamma: f64,
    grid: &[f64],
) -> Result<StieltjesSolution> {
    check_gamma_not_one(gamma)?;
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    if grid.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "grid values must be positive and finite".into(),
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "grid must be strictly ascending".into(),
        ));
    }

    let values: Vec<Option<Complex64>> = grid
        .par_iter()
        .map(|&l| boundary_value(spec, gamma, l).ok())
        .collect();

    let nan = Complex64::new(f64::NAN, f64::NAN);
    let valid: Vec<bool> = values.iter().map(Option::is_some).collect();
    let m_breve: Vec<Complex64> = values.iter().map(|v| v.unwrap_or(nan)).collect();
    let density: Vec<f64> = m_breve
        .iter()
        .map(|m| m.im / std::f64::consts::PI)
        .collect();

    let mut support = Vec::new();
    let mut run: Option<usize> = None;
    for i in 0..grid.len() {
        let inside = valid[i] && density[i] > EDGE_THRESHOLD;
        match (inside, run) {
            (true, None) => run = Some(i),
            (false, Some(start)) => {
                support.push((grid[start], grid[i - 1]));
                run = None;
            }
            _ => {}
        }
    }
    if let Some(start) = run {
        support.push((grid[start], grid[grid.len() - 1]));
    }

    let (m_under_zero, mass_at_zero) = if gamma < 1.0 {
        (Some(companion_zero(spec, gamma)?), 1.0 - gamma)
    } else {
        (None, 0.0)
    };

    Ok(StieltjesSolution {
        spectrum: spec.clone(),
        gamma,
        grid: grid.to_vec(),
        m_breve,
        density,
        valid,
        support,
        m_under_zero,
        mass_at_zero,
    })
}

/// Refines the support runs of a solution by bisection on the density. Each
/// returned endpoint is the innermost bracket point, so it carries density.
pub fn support_edges(solution: &StieltjesSolution) -> Result<Vec<(f64, f64)>> {
    if solution.support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let grid = &solution.grid;
    let inside = |x: f64| -> bool {
        density_at(&solution.spectrum, solution.gamma, x)
            .map(|d| d > EDGE_THRESHOLD)
            .unwrap_or(false)
    };
    let refine = |mut outside: f64, mut inner: f64| -> f64 {
        while (inner - outside).abs() > EDGE_RESOLUTION {
            let mid = 0.5 * (inner + outside);
            if inside(mid) {
                inner = mid;
            } else {
                outside = mid;
            }
        }
        inner
    };

    let mut edges = Vec::with_capacity(solution.support.len());
    for &(lo, hi) in &solution.support {
        let i = grid.partition_point(|&x| x < lo);
        let j = grid.partition_point(|&x| x <= hi) - 1;
        let left = if i > 0 {
            refine(grid[i - 1], grid[i])
        } else {
            lo
        };
        let right = if j + 1 < grid.len() {
            refine(grid[j + 1], grid[j])
        } else {
            hi
        };
        edges.push((left, right));
    }
    Ok(edges)
}

impl StieltjesSolution {
    /// Solution on the default grid with refined support edges.
    pub fn compute(spec: &PopulationSpectrum, gamma: f64) -> Result<Self> {
        Self::with_grid_points(spec, gamma, DEFAULT_GRID_POINTS)
    }

    pub fn with_grid_points(spec: &PopulationSpectrum, gamma: f64, points: usize) -> Result<Self> {
        check_gamma_not_one(gamma)?;
        Self::on_grid(spec, gamma, &default_grid(spec, gamma, points))
    }

    /// Solution on a caller-supplied ascending grid with refined support edges.
    pub fn on_grid(spec: &PopulationSpectrum, gamma: f64, grid: &[f64]) -> Result<Self> {
        let mut sol = boundary_values(spec, gamma, grid)?;
        sol.support = support_edges(&sol)?;
        Ok(sol)
    }

    /// `γ⁻¹ = N / p`.
    pub fn concentration(&self) -> f64 {
        1.0 / self.gamma
    }

    pub fn lower_edge(&self) -> Option<f64> {
        self.support.first().map(|s| s.0)
    }

    pub fn upper_edge(&self) -> Option<f64> {
        self.support.last().map(|s| s.1)
    }

    /// Whether `λ` lies in one of the support intervals.
    pub fn in_support(&self, lambda: f64) -> bool {
        self.support
            .iter()
            .any(|&(a, b)| lambda >= a && lambda <= b)
    }

    /// Closest point of the support to `λ`.
    pub fn nearest_in_support(&self, lambda: f64) -> f64 {
        let mut best = lambda;
        let mut dist = f64::INFINITY;
        for &(a, b) in &self.support {
            let p = lambda.clamp(a, b);
            if (p - lambda).abs() < dist {
                dist = (p - lambda).abs();
                best = p;
            }
        }
        best
    }

    /// `m̆_F(λ)` by cubic interpolation on the grid, falling back to a direct
    /// solve outside the grid, next to an invalid entry, or within
    /// [`EDGE_GUARD_CELLS`] grid cells of a support edge (square-root
    /// behaviour there defeats the interpolant).
    pub fn m_breve_at(&self, lambda: f64) -> Result<Complex64> {
        if let Some((v, first, last)) = interp::cubic(&self.grid, &self.m_breve, lambda) {
            let guard = EDGE_GUARD_CELLS * (self.grid[last] - self.grid[first]);
            let near_edge = self
                .support
                .iter()
                .any(|&(a, b)| (lambda - a).abs() < guard || (lambda - b).abs() < guard);
            if !near_edge && self.valid[first..=last].iter().all(|&ok| ok) {
                let mut v = v;
                // interpolation overshoot next to an edge
                if v.im < 0.0 {
                    v.im = 0.0;
                }
                return Ok(v);
            }
        }
        boundary_value(&self.spectrum, self.gamma, lambda)
    }

    /// `1 − γ⁻¹ − γ⁻¹ λ m̆_F(λ)`.
    pub fn correction_term(&self, lambda: f64) -> Result<Complex64> {
        let c = self.concentration();
        Ok(1.0 - c - c * lambda * self.m_breve_at(lambda)?)
    }

    pub fn density_at(&self, lambda: f64) -> Result<f64> {
        if lambda <= 0.0 {
            return Ok(0.0);
        }
        Ok(self.m_breve_at(lambda)?.im / std::f64::consts::PI)
    }

    /// Trapezoid integral over the grid of `values[i] · F′(grid[i])`, up to `x`.
    pub fn integrate_density_weighted(&self, values: &[f64], x: f64) -> f64 {
        let g = &self.grid;
        let f = |i: usize| {
            if self.valid[i] {
                values[i] * self.density[i].max(0.0)
            } else {
                0.0
            }
        };
        let mut acc = 0.0;
        for i in 0..g.len().saturating_sub(1) {
            if x <= g[i] {
                break;
            }
            let (a, b) = (g[i], g[i + 1]);
            if x >= b {
                acc += 0.5 * (b - a) * (f(i) + f(i + 1));
            } else {
                let s = (x - a) / (b - a);
                let fx = f(i) + s * (f(i + 1) - f(i));
                acc += 0.5 * (x - a) * (f(i) + fx);
            }
        }
        acc
    }

    /// Limiting sample spectral distribution `F(λ)`, including the atom at
    /// zero when `γ < 1`.
    pub fn cdf(&self, lambda: f64) -> f64 {
        if lambda < 0.0 {
            return 0.0;
        }
        let ones = vec![1.0; self.grid.len()];
        self.mass_at_zero + self.integrate_density_weighted(&ones, lambda)
    }

    /// `∫ F′ dλ + mass_at_zero` over the whole grid.
    pub fn total_mass(&self) -> f64 {
        self.cdf(f64::INFINITY)
    }

    /// Smallest `λ` with `F(λ) ≥ u · total_mass`, to [`EDGE_RESOLUTION`].
    pub fn quantile(&self, u: f64) -> f64 {
        let target = u.clamp(0.0, 1.0) * self.total_mass();
        if target <= self.mass_at_zero {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, self.grid[self.grid.len() - 1]);
        while hi - lo > EDGE_RESOLUTION {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    /// CSV with columns `lambda,m_re,m_im,density`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda", "m_re", "m_im", "density"])?;
        for i in 0..self.grid.len() {
            let m = self.m_breve[i];
            w.write_record([
                crate::fmt_float(self.grid[i]),
                crate::fmt_float(m.re),
                crate::fmt_float(m.im),
                crate::fmt_float(self.density[i]),
            ])?;
        }
        w.flush()
    }
}
