use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    Sequence { len: usize, max: usize },

    #[error("intervention hook altered causally masked entry ({row}, {col}) at layer {layer}, head {head}")]
    InterventionContract {
        layer: usize,
        head: usize,
        row: usize,
        col: usize,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Training { step: usize, loss: f64 },

    #[error("infeasible world spec: {0}")]
    Spec(String),

    #[error("cannot build probes: {0}")]
    ProbeConstruction(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed record: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
