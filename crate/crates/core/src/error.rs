use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model shape: {0}")]
    Shape(String),

    #[error("empty output tensor")]
    EmptyOutput,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid pruning rate {0}: must be in [0, 1)")]
    InvalidRate(f64),

    #[error("bit-width {0} out of range [2, 16]")]
    BitWidth(u32),

    #[error("invalid range [{min}, {max}]")]
    InvalidRange { min: f64, max: f64 },

    #[error("requantization multiplier must be positive and finite, got {0}")]
    Multiplier(f64),

    #[error("model has no recorded activation ranges; calibrate before quantizing")]
    CalibrationRequired,

    #[error("32-bit accumulator overflow in layer {layer}")]
    AccumulatorOverflow { layer: usize },

    #[error("bias of layer {layer} does not fit in 32 bits")]
    BiasOverflow { layer: usize },

    #[error("table {table} needs {entries} entries, over the cap of {cap}")]
    Capacity { table: String, entries: u64, cap: u64 },

    #[error("infeasible layout: stage {stage} does not fit in a budget of {budget} stages")]
    Infeasible { stage: String, budget: usize },

    #[error("table miss in {table} for key {key:?} (compiler did not cover this key)")]
    TableMiss { table: String, key: Vec<i64> },

    #[error("value {value} does not fit field {field} ({width} bits)")]
    FieldOverflow { field: String, value: i64, width: u32 },

    #[error("malformed program: {0}")]
    Program(String),

    #[error("forbidden primitive {0} in pipeline program")]
    ForbiddenPrimitive(String),

    #[error("inference did not terminate within {0} passes")]
    NonTermination(usize),

    #[error("missing feature normalization bounds")]
    MissingNormalizer,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
