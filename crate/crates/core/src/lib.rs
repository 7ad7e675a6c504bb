//! Limiting spectral objects of large sample covariance matrices.
//!
//! The crate evaluates, for a population spectral distribution `H` and an
//! aspect ratio `gamma = p / N` (samples over dimension):
//!
//! - the Marchenko-Pastur Stieltjes transform `m_F(z)` and its boundary values
//!   on the real axis ([`stieltjes`]),
//! - the generalized functionals `Theta^g(z)` ([`functionals`]),
//! - the sample/population eigenvector overlap kernel ([`overlap`]),
//! - the optimal nonlinear shrinkage curves for the covariance matrix and its
//!   inverse ([`shrinkage`]),
//!
//! and checks them against a Monte-Carlo harness ([`simulate`]).
//!
//! ```no_run
//! use rmt_shrink::{PopulationSpectrum, StieltjesSolution};
//!
//! let spec = PopulationSpectrum::from_atoms(&[(0.2, 1.0), (0.4, 3.0), (0.4, 10.0)]).unwrap();
//! let sol = StieltjesSolution::compute(&spec, 2.0).unwrap();
//! println!("support: {:?}", sol.support);
//! ```

pub mod cli;
pub mod error;
pub mod functionals;
mod interp;
pub mod overlap;
pub mod shrinkage;
pub mod simulate;
pub mod spectrum;
pub mod stieltjes;

pub use error::{Error, Result};
pub use functionals::WeightFunction;
pub use num_complex::Complex64;
pub use overlap::OverlapKernel;
pub use shrinkage::ShrinkageCurve;
pub use simulate::{EntryLaw, SimulationConfig, SimulationReport};
pub use spectrum::PopulationSpectrum;
pub use stieltjes::StieltjesSolution;

/// Lossless float formatting for CSV output (17 significant digits).
pub(crate) fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}
