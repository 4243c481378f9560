use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("duplicate variable name `{0}`")]
    DuplicateName(String),

    #[error("panel has no rows or no columns")]
    EmptyPanel,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("series too short: {0}")]
    TooShort(String),

    #[error("design matrix is singular even with Ridge regularization")]
    SingularDesign,

    #[error("invalid simulator spec: {0}")]
    InvalidSpec(String),

    #[error("`{0}` is not a variable of this model")]
    InvalidTarget(String),

    #[error("{name} = {value} is outside the physical range [{low}, {high}]")]
    OutOfPhysicalRange {
        name: String,
        value: f64,
        low: f64,
        high: f64,
    },

    #[error("operation not supported for the {0} simulator")]
    UnsupportedVariant(String),

    #[error("ODE integration failed: {0}")]
    IntegrationFailure(String),

    #[error("bad range: {0}")]
    BadRange(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("empty sample")]
    EmptySample,

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("training diverged at step {step} (loss trace has {} entries)", trace.len())]
    Divergence { step: usize, trace: Vec<f64> },

    #[error("flow trajectory became non-finite")]
    NonFiniteTrajectory,

    #[error("no closed-form effect oracle for {0}")]
    NoOracle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
