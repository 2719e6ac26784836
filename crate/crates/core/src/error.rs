use thiserror::Error;

/// Failures raised by oracles, solvers and configuration parsing.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DroError {
    #[error("loss index {index} out of range for an ensemble of {n} losses")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("point has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point lies {distance} from the domain center, outside radius {radius}")]
    OutsideDomain { distance: f64, radius: f64 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("conjugate maximization did not converge on [{lo}, {hi}]")]
    ConjugateNonconvergence { lo: f64, hi: f64 },
    #[error("dual root not bracketed: weight sum {at_lo} at the lower end, {at_hi} at the upper end")]
    BracketFailure { at_lo: f64, at_hi: f64 },
    #[error("sampling weights sum to {sum}, expected 1")]
    PmfInconsistent { sum: f64 },
    #[error("importance ratio {ratio} exceeds the in-ball bound e^2")]
    RatioBound { ratio: f64 },
    #[error("method needs smooth losses but the smoothness constant is infinite")]
    NotSmooth,
    #[error("method needs bounded losses but the loss bound is infinite")]
    UnboundedLosses,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("regularized solve failed at multiplier {nu}: {source}")]
    InnerSolve { nu: f64, source: Box<DroError> },
}

pub type Result<T> = std::result::Result<T, DroError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> DroError {
    DroError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
