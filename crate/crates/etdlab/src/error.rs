use thiserror::Error;

/// Errors surfaced by model construction, exact analysis and the simulators.
#[derive(Debug, Error)]
pub enum EtdError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("action {action} at state {state} has positive target probability but zero behavior probability")]
    UnreachableAction { state: usize, action: usize },

    #[error("transition matrix is not irreducible (no strictly positive stationary distribution)")]
    NonIrreducible,

    #[error("linear system is singular: {0}")]
    SingularSystem(String),

    #[error("b is not in the range of C (residual {residual:.3e})")]
    Inconsistent { residual: f64 },

    #[error("no emphasized states (all interest weights reach zero emphasis)")]
    EmptyEmphasis,

    #[error("iterate became non-finite at step {step}")]
    NonFinite { step: usize },

    #[error("window [{from}, {to}) out of range for log of length {len}")]
    WindowOutOfRange { from: usize, to: usize, len: usize },

    #[error("no runs found: {0}")]
    MissingRuns(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EtdError>;
