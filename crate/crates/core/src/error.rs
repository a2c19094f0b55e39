use thiserror::Error;

/// Errors produced by the spectral, quadrature and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("invalid bulk distribution: {0}")]
    InvalidBulk(String),

    #[error("invalid moment profile: {0}")]
    InvalidMoments(String),

    #[error(
        "spike below bulk: resolved spike {value} does not exceed the largest bulk atom {bulk_max}"
    )]
    SpikeBelowBulk { value: f64, bulk_max: f64 },

    #[error("pole: argument {0} coincides with an atom of the bulk distribution")]
    Pole(f64),

    #[error("spike {alpha} is below the phase transition (phi'(alpha) = {slope})")]
    BelowPhaseTransition { alpha: f64, slope: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("root bracketing failed: {0}")]
    Bracketing(String),

    #[error("contour squeeze: {0}")]
    ContourSqueeze(String),

    #[error("contour too tight: {0}")]
    ContourTooTight(String),

    #[error("contour separation: {0}")]
    ContourSeparation(String),

    #[error("quadrature did not converge: last relative change {last_change:e} at {nodes} nodes per side")]
    QuadratureNonConvergence { last_change: f64, nodes: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("kernel domain error: {0}")]
    KernelDomain(String),

    #[error("unrecognized kernel `{0}`")]
    KernelParse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{invalid} of {reps} repetitions were invalid (limit 1%)")]
    TooManyInvalidReps { invalid: usize, reps: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
