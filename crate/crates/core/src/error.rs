use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("row {row} has no unmasked positions")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("hook at layer {layer} returned an invalid index set: {reason}")]
    InvalidHookSelection { layer: usize, reason: String },

    #[error("k = {k} exceeds the {available} available tokens")]
    KeepTooLarge { k: usize, available: usize },

    #[error(
        "budget {budget} is infeasible for this policy; feasible range is [{min:.3}, {max:.3}]"
    )]
    InfeasibleBudget { budget: f64, min: f64, max: f64 },

    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),

    #[error("series too short: need at least {min} points, got {len}")]
    SeriesTooShort { len: usize, min: usize },

    #[error("corpus is heterogeneous: expected {expected} layers, sample {sample} has {actual}")]
    HeterogeneousCorpus {
        expected: usize,
        actual: usize,
        sample: String,
    },

    #[error("cost parameter {0} must be positive")]
    InvalidCostParam(&'static str),

    #[error("FLOPs arithmetic overflow")]
    Overflow,

    #[error("trace error in {path}: {reason}")]
    Trace { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn trace(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Trace {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable short name for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Empty(_) => "empty",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::FullyMaskedRow { .. } => "fully_masked_row",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::InvalidHookSelection { .. } => "invalid_hook_selection",
            Error::KeepTooLarge { .. } => "keep_too_large",
            Error::InfeasibleBudget { .. } => "infeasible_budget",
            Error::InvalidFraction(_) => "invalid_fraction",
            Error::SeriesTooShort { .. } => "series_too_short",
            Error::HeterogeneousCorpus { .. } => "heterogeneous_corpus",
            Error::InvalidCostParam(_) => "invalid_cost_param",
            Error::Overflow => "overflow",
            Error::Trace { .. } => "trace",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
        }
    }
}
