use thiserror::Error;

/// Errors raised by the laboratory. Every variant carries enough context to
/// locate the offending input without re-running.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid label {value} at sample {index}: labels must be +1 or -1")]
    InvalidLabel { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(
        "singular covariance on span(X): eigenvalue {eigenvalue:e} is below the clamp {clamp:e}"
    )]
    Singular { eigenvalue: f64, clamp: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate state: ||w||_Sigma = {norm:e} is below 1e-14")]
    Degenerate { norm: f64 },

    #[error("off the positive-alignment branch: rho = {rho:e}")]
    BranchViolation { rho: f64 },

    #[error("dataset generation failed after {retries} retries: {reason}")]
    GenerationFailed { retries: usize, reason: String },

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("dataset is not linearly separable (dual unbounded)")]
    NotSeparable,

    #[error("{what} did not converge: residual {residual:e}")]
    Convergence { what: &'static str, residual: f64 },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("no rising segment: run the onset analysis first")]
    NoRisingSegment,

    #[error("step {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<BnError>,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for BnError {
    fn from(e: std::io::Error) -> Self {
        BnError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, BnError>;
