use thiserror::Error;

/// Errors raised while reading or writing panel files.
#[derive(Debug, Error)]
pub enum PanelError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("duplicate observation for unit `{unit}` in period `{period}` (line {line})")]
    DuplicateCell {
        unit: String,
        period: String,
        line: u64,
    },
    #[error("non-numeric outcome `{value}` for unit `{unit}` in period `{period}` (line {line})")]
    NonNumericOutcome {
        unit: String,
        period: String,
        value: String,
        line: u64,
    },
    #[error("invalid treatment flag `{value}` for unit `{unit}` in period `{period}` (line {line})")]
    InvalidTreated {
        unit: String,
        period: String,
        value: String,
        line: u64,
    },
    #[error("ragged panel: unit `{unit}` has no observation for period `{period}`")]
    RaggedPanel { unit: String, period: String },
    #[error("period label `{0}` is neither an integer nor a YYYY-MM-DD date")]
    BadPeriodLabel(String),
    #[error("unknown unit `{0}` in treatment sidecar")]
    UnknownSidecarUnit(String),
    #[error("unknown period `{period}` for unit `{unit}` in treatment sidecar")]
    UnknownSidecarPeriod { unit: String, period: String },
    #[error("panel is empty")]
    Empty,
    #[error("invalid panel: {0}")]
    Invalid(String),
    #[error("treatment of unit `{0}` is not absorbing and cannot be written as a first-treated period")]
    NonAbsorbingTreatment(String),
}

/// Errors from the numerical kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("QP did not converge after {iterations} iterations (kkt residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
}

/// Errors raised by estimators, selection, inference and simulation.
#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("role assignment invalid: {0} violation(s)")]
    InvalidRoles(usize),
    #[error("no control units")]
    NoControls,
    #[error("no pre-treatment periods")]
    NoPrePeriods,
    #[error("no post-treatment periods")]
    NoPostPeriods,
    #[error("two-step weighting requires at least two pre-treatment periods")]
    TwoStepTooShort,
    #[error("effect weights invalid: {0}")]
    EffectWeights(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unconstrained weights cannot be used for subsampling inference")]
    OffSimplexWeights,
    #[error("only {usable} usable subsample block(s); reduce the block length m")]
    TooFewBlocks { usable: usize },
    #[error("logistic regression did not converge after {0} iterations")]
    LogisticNotConverged(usize),
}

pub type Result<T, E = EstimationError> = std::result::Result<T, E>;
