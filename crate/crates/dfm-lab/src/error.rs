//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by state-space, CTMC, path, model, and harness operations.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a domain precondition (bad token, bad shape, bad range).
    #[error("domain error: {0}")]
    Domain(String),

    /// An enumeration or allocation would exceed the configured cap.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A numerical invariant broke during integration; names the offending step.
    #[error("numerical integrity violated at step {step}: {detail}")]
    NumericalIntegrity { step: usize, detail: String },

    /// Evaluation requested at a pole of the schedule coefficient.
    #[error("singularity: {0}")]
    Singularity(String),

    /// A time outside the configured clip interval was requested in strict mode.
    #[error("time {t} outside clip interval [{t0}, {t1}]")]
    ClipViolation { t: f64, t0: f64, t1: f64 },

    /// A posterior was requested at a state carrying zero path mass.
    #[error("undefined posterior: marginal path mass is zero at the queried state")]
    UndefinedPosterior,

    /// A caller-supplied bound is violated by the data it claims to bound.
    #[error("input bound violated: {0}")]
    InputBound(String),

    /// A non-finite value appeared during evaluation; names the layer.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training aborted with diagnostics.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    /// A text table (CSV) failed to parse.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
