use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the simulation engine.
///
/// Variants carry enough context to point at the offending input: tensor
/// shapes, dataset positions, or plan cells. I/O and decode failures wrap the
/// underlying cause.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value in tensor {name:?} at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("duplicate layer name {0:?}")]
    DuplicateLayer(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("weights must be non-negative with a positive sum (got sum {sum})")]
    BadWeights { sum: f64 },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("feature width mismatch: expected {expected}, got {got} (row {row})")]
    WidthMismatch { expected: usize, got: usize, row: usize },

    #[error(
        "infeasible plan: client {client} class {class} needs {requested} \
         rows but only {available} remain"
    )]
    InfeasiblePlan { client: usize, class: usize, requested: usize, available: usize },

    #[error("need at least two parameter sets, got {0}")]
    TooFewSets(usize),

    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("round {round}: {source}")]
    Round {
        round: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at row {row}, column {col}: {message}")]
    Parse { row: usize, col: usize, message: String },

    #[error("malformed parameter file: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
