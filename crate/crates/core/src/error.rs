use thiserror::Error;

/// Errors raised by the numerical engines and diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("under-resolved grid: {what} needs cell width <= {required:.6e}, have {actual:.6e}")]
    Resolution {
        what: String,
        required: f64,
        actual: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("boundary leak: {mass:.3e} of mass reached the domain edge ({context})")]
    BoundaryLeak { mass: f64, context: String },

    #[error("drift evaluation failed at t={t}, x={x:?}, u={u}: {reason}")]
    DriftEvaluation {
        t: f64,
        x: Vec<f64>,
        u: f64,
        reason: String,
    },

    #[error("unknown drift `{name}`; available: {}", available.join(", "))]
    UnknownDrift {
        name: String,
        available: Vec<String>,
    },

    #[error("expression error: {0}")]
    Expression(String),

    #[error("stability violation: {0}")]
    Stability(String),

    #[error("scheme failure: {0}")]
    SchemeFailure(String),

    #[error("non-finite particle {index} after step {step}: position {position:?}")]
    NonFiniteParticle {
        index: usize,
        step: usize,
        position: Vec<f64>,
    },

    #[error("invalid test function: {0}")]
    TestFunction(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
