use thiserror::Error;

/// Errors raised by the numerical kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LapError {
    #[error("invalid direction: {0}")]
    InvalidDirection(String),

    #[error("point {point:?} is not on the boundary of the Brillouin zone")]
    NotOnBoundary { point: Vec<f64> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid medium: {0}")]
    InvalidMedium(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("band {band} is degenerate at alpha={alpha:?} (gap {gap:.3e})")]
    DegenerateBand {
        band: usize,
        alpha: Vec<f64>,
        gap: f64,
    },

    #[error("shift is too close to the spectrum at alpha={alpha:?} (margin {margin:.3e})")]
    PoleProximity { alpha: Vec<[f64; 2]>, margin: f64 },

    #[error("ambiguous band crossing at s={s:.6} (overlaps {first:.3} vs {second:.3})")]
    CrossingAmbiguity { s: f64, first: f64, second: f64 },

    #[error("irregular frequency: {0}")]
    IrregularLambda(String),

    #[error("higher-order degeneracy at anchor {anchor:?}: second derivative {a0:.3e} below threshold")]
    HigherOrderDegeneracy { anchor: Vec<f64>, a0: f64 },

    #[error("complex branch continuation failed: {0}")]
    BranchContinuation(String),

    #[error("contour construction failed: worst margin {margin:.3e} at alpha={alpha:?}")]
    ContourConstruction { margin: f64, alpha: Vec<[f64; 2]> },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, LapError>;
