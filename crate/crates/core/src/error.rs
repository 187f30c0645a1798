use thiserror::Error;

/// Errors produced by the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate constellation: {0}")]
    DegenerateConstellation(String),

    #[error("BER model unsupported for {id}: {reason}")]
    UnsupportedBerModel { id: String, reason: String },

    #[error("BER threshold {ber_th:e} is unreachable (lowest attainable {floor:e})")]
    UnreachableBer { ber_th: f64, floor: f64 },

    #[error("infeasible subcarrier: {0}")]
    InfeasibleSubcarrier(String),

    #[error("reciprocal filter divides by zero at bin {bin}; use a positive regularizer")]
    DivisionByZero { bin: usize },

    #[error("cannot integrate profiles from different chains or lengths")]
    MixedProfiles,

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("instance too large for exhaustive search: {assignments} assignments (limit {limit})")]
    InstanceTooLarge { assignments: f64, limit: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
