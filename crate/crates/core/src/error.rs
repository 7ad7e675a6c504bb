use thiserror::Error;

/// Errors raised by the spectral solvers, shrinkage formulas and simulation harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("population spectrum places mass at non-positive eigenvalue {0}")]
    NonPositiveSupport(f64),

    #[error("population spectrum weights sum to {0}, expected 1")]
    MassNotOne(f64),

    #[error("invalid population spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("fixed-point solver did not converge at z = {re}+{im}i (residual {residual:e} after {iterations} iterations)")]
    NoConvergence {
        re: f64,
        im: f64,
        residual: f64,
        iterations: usize,
    },

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("aspect ratio gamma = 1 is not supported")]
    GammaOne,

    #[error("no grid point carries density above the support threshold")]
    EmptySupport,

    #[error("degenerate denominator |gamma - 1 - z m_F(z)| = {0:e}")]
    DegenerateDenominator(f64),

    #[error("zero-eigenvalue branch requires gamma < 1 (got gamma = {0})")]
    ZeroBranchUnavailable(f64),

    #[error("bin carries no mass (marginal mass {0:e})")]
    EmptyBin(f64),

    #[error("linear shrinkage span is degenerate: {0}")]
    DegenerateSpan(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
