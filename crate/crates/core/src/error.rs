use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("invalid mask: row {row} has no unmasked position")]
    InvalidMask { row: usize },
    #[error("empty batch: every position is ignored")]
    EmptyBatch,
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("computation record already consumed by a backward pass")]
    StaleRecord,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("{0} tokens exceed the context limit of {1}")]
    ContextOverflow(usize, usize),
    #[error("timestep {timestep} outside embedding table of {len} rows")]
    TimestepOutOfRange { timestep: usize, len: usize },
    #[error("return {value} cannot be binned into [{min}, {max}]")]
    Binning { value: f64, min: i64, max: i64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid window: {0}")]
    Window(String),
    #[error("action {action} out of range (0..{n})")]
    ActionOutOfRange { action: usize, n: usize },
    #[error("episode already finished; call reset")]
    EpisodeDone,
    #[error("environment generation failed: {0}")]
    Generation(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("corrupt dataset at line {line}: {reason}")]
    CorruptDataset { line: usize, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("{0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
