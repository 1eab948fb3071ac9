//! Crate-wide error type.

use thiserror::Error;

use crate::model::ValidationReport;

/// Errors produced by model ingestion, probability kernels and solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// A model file could not be parsed or has an inconsistent shape.
    #[error("model format error at `{path}`: {message}")]
    ModelFormat { path: String, message: String },

    /// The file declares a schema version this build does not understand.
    #[error("unsupported schema version `{found}` (expected `{expected}`)")]
    SchemaVersion { found: String, expected: String },

    /// Validation found at least one violated invariant.
    #[error("invalid model:\n{0}")]
    InvalidModel(ValidationReport),

    /// A callable kernel or cost was referenced by name but never registered.
    #[error("unknown callable `{name}`; register it before loading the model")]
    UnknownCallable { name: String },

    /// Callable kernels and costs have no tabular representation to write.
    #[error("callable `{name}` cannot be serialized; use a tabular or affine form")]
    NotSerializable { name: String },

    /// A deviator was placed at a state the deep state says is unoccupied.
    #[error("deviator state {state} inconsistent with deep state (count is zero)")]
    DeviatorStateInconsistent { state: usize },

    /// An exact distribution would need more support points than allowed.
    #[error("exact kernel too large; reduce n or |X| (support cap {cap} exceeded)")]
    SupportCapExceeded { cap: usize },

    /// A strategy lookup failed during simulation or audit.
    #[error("strategy does not cover visited node (t={stage}, d={counts:?})")]
    StrategyGap { stage: usize, counts: Vec<u32> },

    /// The discounted coupling condition beta * K^m < 1 fails.
    #[error("discounted bound refused: beta * K^m = {beta_km} >= 1")]
    CouplingTooStrong { beta_km: f64 },

    /// A value table or strategy was used with a mismatched model.
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
