use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("state {state:?} left the model domain")]
    Domain { state: Vec<f64> },
    #[error("viscosity matrix is singular or fails the ellipticity bound ({0})")]
    Ellipticity(String),
    #[error("integration step underflow at t = {t:.6e}")]
    StepUnderflow { t: f64 },
    #[error("integration exceeded {steps} steps")]
    TooManySteps { steps: usize },
    #[error("Newton iteration did not converge; residual history {residuals:?}")]
    NoConvergence { residuals: Vec<f64> },
    #[error("orbit collapsed to an equilibrium (oscillation {amplitude:.3e})")]
    DegenerateOrbit { amplitude: f64 },
    #[error("wave family is degenerate: {0}")]
    Nondegeneracy(String),
    #[error("polynomial deflation left residual {residual:.3e}")]
    Deflation { residual: f64 },
    #[error("expected {expected} eigenvalues in the critical cluster, found {found}")]
    ClusterCount { expected: usize, found: usize },
    #[error("branch tracking is ambiguous at radius {radius:.3e} on ray {ray}")]
    BranchAmbiguity { ray: usize, radius: f64 },
    #[error("contour passes within {distance:.3e} of a zero at lambda = {lambda}")]
    ContourHitsZero { lambda: String, distance: f64 },
    #[error("winding number {value:.4} is not close to an integer")]
    NonIntegerWinding { value: f64 },
    #[error("resolution too coarse: {0}")]
    Resolution(String),
    #[error("structural check failed: {0}")]
    Structural(String),
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("perturbation norm {norm:.3e} exceeded the smallness threshold {threshold:.3e} at t = {t:.4}")]
    Smallness { norm: f64, threshold: f64, t: f64 },
    #[error("linear algebra failure: {0}")]
    Linalg(String),
}

pub type Result<T> = std::result::Result<T, Error>;
