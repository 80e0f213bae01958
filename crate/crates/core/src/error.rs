use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension { op: String, left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("softmax row {row} is entirely -inf")]
    DegenerateRow { row: usize },

    #[error("tensor does not belong to this tape")]
    Provenance,

    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("input must be {{0,1}}-valued, found {value} at flat index {index}")]
    NonBinary { index: usize, value: f64 },

    #[error("non-finite input to {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("sequence length {len} exceeds max_len {max_len}")]
    Capacity { len: usize, max_len: usize },

    #[error("model dimension {d} is not divisible by {heads} heads")]
    Divisibility { d: usize, heads: usize },

    #[error("attention kind {expected} required, got {actual}")]
    WrongKind { expected: String, actual: String },

    #[error("unsupported combination: {variant} at {level} level")]
    UnsupportedCombination { variant: String, level: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cannot draw {requested} distinct sequences; only {available} exist")]
    Exhaustion { requested: u128, available: u128 },

    #[error("training diverged at step {step} (lr = {lr:e})")]
    Divergence { step: u64, lr: f64 },

    #[error("instrumented regions cannot be nested")]
    NestedInstrumentation,

    #[error("model has no E-ATT attention role; no binarization statistics to collect")]
    NoBinarizedRole,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
