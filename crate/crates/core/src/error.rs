use thiserror::Error;

/// Errors produced anywhere in the probing pipeline.
#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("malformed ACTV1 header: {0}")]
    MalformedHeader(String),
    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    DimensionMismatch { expected: u64, actual: u64 },
    #[error("non-finite activation at row {row}, col {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("manifest has no spans")]
    MissingSpans,
    #[error("span {index} covers no rows")]
    EmptySpan { index: usize },
    #[error("degenerate class: {0}")]
    DegenerateClass(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("neighbor count {k} must be below the smallest training class size {min_class}")]
    NeighborCountTooLarge { k: usize, min_class: usize },
    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    SolverDidNotConverge { iterations: usize, grad_norm: f64 },
    #[error("support index {index} out of range for {cols} columns")]
    SupportOutOfRange { index: usize, cols: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("inner dual solver failed: {0}")]
    InnerSolverFailure(String),
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("circle embedding needs at least 3 features, got {0}")]
    TooFewFeatures(usize),
    #[error("infeasible planted spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("no records to summarize")]
    EmptyRecords,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;
