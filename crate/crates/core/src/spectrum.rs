//! Population spectral distribution `H`: weighted point masses plus uniform
//! segments, with exact integration against atoms and fixed-order
//! Gauss-Legendre quadrature over segments.

use std::num::NonZeroUsize;
use std::ops::{Add, Mul};
use std::sync::OnceLock;

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quadrature order used on every segment panel.
pub const QUADRATURE_ORDER: usize = 64;

/// Tolerance on the total mass of a spectrum.
pub const MASS_TOLERANCE: f64 = 1e-12;

fn legendre_rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let order = NonZeroUsize::new(QUADRATURE_ORDER).expect("nonzero order");
        GaussLegendre::new(order).as_node_weight_pairs().to_vec()
    })
}

/// A point mass of `H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub weight: f64,
    pub location: f64,
}

/// A uniform piece of `H`: mass `weight` spread evenly over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub weight: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Segment {
    pub fn density(&self) -> f64 {
        self.weight / (self.hi - self.lo)
    }
}

/// JSON form of a spectrum: `{"atoms":[[w,tau],...],"segments":[[w,lo,hi],...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDocument {
    #[serde(default)]
    pub atoms: Vec<[f64; 2]>,
    #[serde(default)]
    pub segments: Vec<[f64; 3]>,
}

/// Limiting population spectral distribution.
///
/// Construct through [`PopulationSpectrum::validate`] (or one of the
/// convenience constructors); the value is immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpectrum {
    atoms: Vec<Atom>,
    segments: Vec<Segment>,
    h1: f64,
    h2: f64,
}

impl PopulationSpectrum {
    /// Checks raw atoms and segments and returns the sorted representation
    /// with `h1`/`h2` recomputed from content.
    pub fn validate(atoms: Vec<Atom>, segments: Vec<Segment>) -> Result<Self> {
        for a in &atoms {
            if !a.weight.is_finite() || !a.location.is_finite() {
                return Err(Error::InvalidSpectrum("non-finite atom".into()));
            }
            if a.weight < 0.0 {
                return Err(Error::InvalidSpectrum(format!(
                    "negative weight {}",
                    a.weight
                )));
            }
            if a.weight > 0.0 && a.location <= 0.0 {
                return Err(Error::NonPositiveSupport(a.location));
            }
        }
        for s in &segments {
            if !s.weight.is_finite() || !s.lo.is_finite() || !s.hi.is_finite() {
                return Err(Error::InvalidSpectrum("non-finite segment".into()));
            }
            if s.weight < 0.0 {
                return Err(Error::InvalidSpectrum(format!(
                    "negative weight {}",
                    s.weight
                )));
            }
            if s.hi <= s.lo {
                return Err(Error::InvalidSpectrum(format!(
                    "segment [{}, {}] is empty",
                    s.lo, s.hi
                )));
            }
            if s.weight > 0.0 && s.lo <= 0.0 {
                return Err(Error::NonPositiveSupport(s.lo));
            }
        }

        let total: f64 = atoms.iter().map(|a| a.weight).sum::<f64>()
            + segments.iter().map(|s| s.weight).sum::<f64>();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::MassNotOne(total));
        }

        let mut atoms: Vec<Atom> = atoms.into_iter().filter(|a| a.weight > 0.0).collect();
        let mut segments: Vec<Segment> = segments.into_iter().filter(|s| s.weight > 0.0).collect();
        atoms.sort_by(|a, b| a.location.total_cmp(&b.location));
        segments.sort_by(|a, b| a.lo.total_cmp(&b.lo).then(a.hi.total_cmp(&b.hi)));

        // merge atoms sitting on the same location
        let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
        for a in atoms {
            match merged.last_mut() {
                Some(last) if last.location == a.location => last.weight += a.weight,
                _ => merged.push(a),
            }
        }

        let h1 = merged
            .iter()
            .map(|a| a.location)
            .chain(segments.iter().map(|s| s.lo))
            .fold(f64::INFINITY, f64::min);
        let h2 = merged
            .iter()
            .map(|a| a.location)
            .chain(segments.iter().map(|s| s.hi))
            .fold(f64::NEG_INFINITY, f64::max);

        Ok(Self {
            atoms: merged,
            segments,
            h1,
            h2,
        })
    }

    /// Spectrum made only of point masses, given as `(weight, location)` pairs.
    pub fn from_atoms(atoms: &[(f64, f64)]) -> Result<Self> {
        Self::validate(
            atoms
                .iter()
                .map(|&(weight, location)| Atom { weight, location })
                .collect(),
            Vec::new(),
        )
    }

    pub fn point_mass(location: f64) -> Result<Self> {
        Self::from_atoms(&[(1.0, location)])
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        Self::validate(
            Vec::new(),
            vec![Segment {
                weight: 1.0,
                lo,
                hi,
            }],
        )
    }

    pub fn from_document(doc: &SpectrumDocument) -> Result<Self> {
        Self::validate(
            doc.atoms
                .iter()
                .map(|&[weight, location]| Atom { weight, location })
                .collect(),
            doc.segments
                .iter()
                .map(|&[weight, lo, hi]| Segment { weight, lo, hi })
                .collect(),
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SpectrumDocument = serde_json::from_str(text)
            .map_err(|e| Error::InvalidSpectrum(format!("malformed spectrum JSON: {e}")))?;
        Self::from_document(&doc)
    }

    pub fn to_document(&self) -> SpectrumDocument {
        SpectrumDocument {
            atoms: self.atoms.iter().map(|a| [a.weight, a.location]).collect(),
            segments: self
                .segments
                .iter()
                .map(|s| [s.weight, s.lo, s.hi])
                .collect(),
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Infimum of the support.
    pub fn h1(&self) -> f64 {
        self.h1
    }

    /// Supremum of the support.
    pub fn h2(&self) -> f64 {
        self.h2
    }

    /// `∫ f dH`: exact sum over atoms plus order-64 Gauss-Legendre on each segment.
    pub fn integrate<T, F>(&self, f: F) -> T
    where
        T: Default + Add<Output = T> + Mul<f64, Output = T>,
        F: Fn(f64) -> T,
    {
        self.integrate_split(f, &[])
    }

    /// Same as [`integrate`](Self::integrate), but segment panels are split at
    /// every point of `breaks` lying strictly inside a segment.
    pub fn integrate_split<T, F>(&self, f: F, breaks: &[f64]) -> T
    where
        T: Default + Add<Output = T> + Mul<f64, Output = T>,
        F: Fn(f64) -> T,
    {
        let mut acc = T::default();
        for a in &self.atoms {
            acc = acc + f(a.location) * a.weight;
        }
        for s in &self.segments {
            acc = acc + integrate_segment(&f, s.density(), s.lo, s.hi, breaks);
        }
        acc
    }

    /// `∫_{t ≤ tau} f(t) dH(t)`.
    pub fn integrate_up_to<T, F>(&self, f: F, tau: f64) -> T
    where
        T: Default + Add<Output = T> + Mul<f64, Output = T>,
        F: Fn(f64) -> T,
    {
        let mut acc = T::default();
        for a in self.atoms.iter().filter(|a| a.location <= tau) {
            acc = acc + f(a.location) * a.weight;
        }
        for s in &self.segments {
            if tau <= s.lo {
                continue;
            }
            let hi = s.hi.min(tau);
            acc = acc + integrate_segment(&f, s.density(), s.lo, hi, &[]);
        }
        acc
    }

    /// Distribution function `H(x)` (right-continuous).
    pub fn cdf(&self, x: f64) -> f64 {
        let atoms: f64 = self
            .atoms
            .iter()
            .filter(|a| a.location <= x)
            .map(|a| a.weight)
            .sum();
        let segs: f64 = self
            .segments
            .iter()
            .map(|s| {
                if x <= s.lo {
                    0.0
                } else if x >= s.hi {
                    s.weight
                } else {
                    s.weight * (x - s.lo) / (s.hi - s.lo)
                }
            })
            .sum();
        atoms + segs
    }

    fn cdf_left(&self, x: f64) -> f64 {
        let atoms_at: f64 = self
            .atoms
            .iter()
            .filter(|a| a.location == x)
            .map(|a| a.weight)
            .sum();
        self.cdf(x) - atoms_at
    }

    /// Smallest `x` with `H(x) ≥ u`, for `u ∈ (0, 1]`.
    pub fn quantile(&self, u: f64) -> f64 {
        let mut points: Vec<f64> = self
            .atoms
            .iter()
            .map(|a| a.location)
            .chain(self.segments.iter().flat_map(|s| [s.lo, s.hi]))
            .collect();
        points.sort_by(f64::total_cmp);
        points.dedup();

        for (k, &b) in points.iter().enumerate() {
            let left = self.cdf_left(b);
            let at = self.cdf(b);
            if u <= left {
                // only reachable through rounding below the first breakpoint
                return b;
            }
            if u <= at {
                return b;
            }
            if let Some(&next) = points.get(k + 1) {
                let next_left = self.cdf_left(next);
                if u <= next_left {
                    return b + (u - at) / (next_left - at) * (next - b);
                }
            }
        }
        self.h2
    }

    /// `m̆_H(0) = ∫ τ⁻¹ dH(τ)`.
    pub fn m_h_at_zero(&self) -> f64 {
        self.integrate(|t| 1.0 / t)
    }

    /// `∫ τ^k dH(τ)`.
    pub fn moment(&self, k: i32) -> f64 {
        self.integrate(|t| t.powi(k))
    }

    /// Deterministic `N`-point discretization: `τ_j = H⁻¹((j − 1/2)/N)`, ascending.
    pub fn population_eigenvalues(&self, n: usize) -> Vec<f64> {
        (1..=n)
            .map(|j| self.quantile((j as f64 - 0.5) / n as f64))
            .collect()
    }
}

fn integrate_segment<T, F>(f: &F, density: f64, lo: f64, hi: f64, breaks: &[f64]) -> T
where
    T: Default + Add<Output = T> + Mul<f64, Output = T>,
    F: Fn(f64) -> T,
{
    let mut cuts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|&b| b > lo && b < hi)
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut acc = T::default();
    let mut left = lo;
    for right in cuts.into_iter().chain(std::iter::once(hi)) {
        acc = acc + gauss_legendre(f, left, right) * density;
        left = right;
    }
    acc
}

fn gauss_legendre<T, F>(f: &F, a: f64, b: f64) -> T
where
    T: Default + Add<Output = T> + Mul<f64, Output = T>,
    F: Fn(f64) -> T,
{
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    let mut acc = T::default();
    for &(x, w) in legendre_rule() {
        acc = acc + f(mid + half * x) * w;
    }
    acc * half
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn three_atoms() -> PopulationSpectrum {
        PopulationSpectrum::from_atoms(&[(0.2, 1.0), (0.4, 3.0), (0.4, 10.0)]).unwrap()
    }

    #[test]
    fn validate_examples() {
        let s = three_atoms();
        assert_eq!((s.h1(), s.h2()), (1.0, 10.0));
        let s = PopulationSpectrum::point_mass(1.0).unwrap();
        assert_eq!((s.h1(), s.h2()), (1.0, 1.0));
        assert_eq!(
            PopulationSpectrum::from_atoms(&[(0.5, 1.0), (0.5, -2.0)]),
            Err(Error::NonPositiveSupport(-2.0))
        );
        assert!(matches!(
            PopulationSpectrum::from_atoms(&[(0.5, 1.0), (0.4, 2.0)]),
            Err(Error::MassNotOne(_))
        ));
        assert!(matches!(
            PopulationSpectrum::uniform(6.0, 5.0),
            Err(Error::InvalidSpectrum(_))
        ));
    }

    #[test]
    fn validate_sorts_and_merges() {
        let s = PopulationSpectrum::from_atoms(&[(0.25, 3.0), (0.5, 1.0), (0.25, 3.0)]).unwrap();
        assert_eq!(
            s.atoms(),
            &[
                Atom {
                    weight: 0.5,
                    location: 1.0
                },
                Atom {
                    weight: 0.5,
                    location: 3.0
                }
            ]
        );
    }

    #[test]
    fn json_document() {
        let s = PopulationSpectrum::from_json(r#"{"atoms":[[0.5,2.0]],"segments":[[0.5,5,6]]}"#)
            .unwrap();
        assert_eq!((s.h1(), s.h2()), (2.0, 6.0));
        let back = PopulationSpectrum::from_document(&s.to_document()).unwrap();
        assert_eq!(back, s);
        assert!(PopulationSpectrum::from_json("{\"atoms\": 3}").is_err());
    }

    #[test]
    fn integrate_examples() {
        let dirac = PopulationSpectrum::point_mass(1.0).unwrap();
        assert_eq!(dirac.integrate(|t| t), 1.0);
        let uni = PopulationSpectrum::uniform(5.0, 6.0).unwrap();
        assert!((uni.integrate(|t| t) - 5.5).abs() < 1e-13);
        assert!((three_atoms().integrate(|t| t) - 5.4).abs() < 1e-13);
        // complex-valued integrand
        let z = Complex64::new(1.0, 0.5);
        let v: Complex64 = uni.integrate(|t| Complex64::new(t, 0.0) * z);
        assert!((v - z * 5.5).norm() < 1e-12);
    }

    #[test]
    fn split_and_truncated_integrals() {
        let uni = PopulationSpectrum::uniform(5.0, 6.0).unwrap();
        let step = |t: f64| if t < 5.5 { 1.0 } else { 0.0 };
        assert!((uni.integrate_split(step, &[5.5]) - 0.5).abs() < 1e-14);
        assert!((uni.integrate_up_to(|_| 1.0, 5.25) - 0.25).abs() < 1e-14);
        assert_eq!(uni.integrate_up_to(|_| 1.0, 4.0), 0.0);
        let atoms = three_atoms();
        assert!((atoms.integrate_up_to(|t| t, 3.0) - 1.4).abs() < 1e-14);
    }

    #[test]
    fn m_h_at_zero_examples() {
        assert_eq!(
            PopulationSpectrum::point_mass(1.0).unwrap().m_h_at_zero(),
            1.0
        );
        assert_eq!(
            PopulationSpectrum::point_mass(2.0).unwrap().m_h_at_zero(),
            0.5
        );
        let expected = 0.2 / 1.0 + 0.4 / 3.0 + 0.4 / 10.0;
        assert!((three_atoms().m_h_at_zero() - expected).abs() < 1e-15);
    }

    #[test]
    fn population_eigenvalue_examples() {
        let dirac = PopulationSpectrum::point_mass(1.0).unwrap();
        assert_eq!(dirac.population_eigenvalues(3), vec![1.0; 3]);
        assert_eq!(
            three_atoms().population_eigenvalues(5),
            vec![1.0, 3.0, 3.0, 10.0, 10.0]
        );
        let uni = PopulationSpectrum::uniform(5.0, 6.0).unwrap();
        let e = uni.population_eigenvalues(2);
        assert!((e[0] - 5.25).abs() < 1e-14 && (e[1] - 5.75).abs() < 1e-14);
        let e = three_atoms().population_eigenvalues(200);
        assert_eq!(e.iter().filter(|&&t| t == 1.0).count(), 40);
        assert_eq!(e.iter().filter(|&&t| t == 3.0).count(), 80);
        assert_eq!(e.iter().filter(|&&t| t == 10.0).count(), 80);
    }

    #[test]
    fn quantile_of_mixed_spectrum() {
        let s = PopulationSpectrum::validate(
            vec![Atom {
                weight: 0.5,
                location: 2.0,
            }],
            vec![Segment {
                weight: 0.5,
                lo: 5.0,
                hi: 6.0,
            }],
        )
        .unwrap();
        assert_eq!(s.quantile(0.3), 2.0);
        assert!((s.quantile(0.75) - 5.5).abs() < 1e-14);
        assert_eq!(s.quantile(1.0), 6.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_spectrum() -> impl Strategy<Value = PopulationSpectrum> {
            (
                prop::collection::vec((0.05f64..1.0, 0.1f64..20.0), 0..4),
                prop::collection::vec((0.05f64..1.0, 0.1f64..20.0, 0.01f64..5.0), 0..3),
            )
                .prop_filter("non-empty", |(a, s)| !a.is_empty() || !s.is_empty())
                .prop_map(|(atoms, segs)| {
                    let total: f64 = atoms.iter().map(|a| a.0).sum::<f64>()
                        + segs.iter().map(|s| s.0).sum::<f64>();
                    PopulationSpectrum::validate(
                        atoms
                            .iter()
                            .map(|&(w, l)| Atom {
                                weight: w / total,
                                location: l,
                            })
                            .collect(),
                        segs.iter()
                            .map(|&(w, lo, len)| Segment {
                                weight: w / total,
                                lo,
                                hi: lo + len,
                            })
                            .collect(),
                    )
                    .unwrap()
                })
        }

        proptest! {
            #[test]
            fn unit_mass(s in arb_spectrum()) {
                prop_assert!((s.integrate(|_| 1.0) - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn linear_in_integrand(s in arb_spectrum(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
                let f = |t: f64| t.sin();
                let g = |t: f64| 1.0 / (1.0 + t);
                let lhs = s.integrate(|t| alpha * f(t) + beta * g(t));
                let rhs = alpha * s.integrate(f) + beta * s.integrate(g);
                prop_assert!((lhs - rhs).abs() <= 1e-12);
            }

            #[test]
            fn quantile_grid_kolmogorov(ws in prop::collection::vec(1usize..6, 1..5), scale in 1usize..8) {
                // atom masses that are multiples of 1/n align with the quantile grid
                let total: usize = ws.iter().sum();
                let n = total * scale;
                let atoms: Vec<(f64, f64)> = ws
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| (w as f64 / total as f64, (i + 1) as f64))
                    .collect();
                let s = PopulationSpectrum::from_atoms(&atoms).unwrap();
                let eig = s.population_eigenvalues(n);
                prop_assert!(eig.windows(2).all(|w| w[0] <= w[1]));
                for &(_, loc) in &atoms {
                    let esd = eig.iter().filter(|&&t| t <= loc).count() as f64 / n as f64;
                    prop_assert!((esd - s.cdf(loc)).abs() <= 1.0 / n as f64);
                }
            }
        }
    }
}
