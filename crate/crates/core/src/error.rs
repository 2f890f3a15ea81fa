use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("layer index {index} out of range 1..={max}")]
    LayerIndex { index: usize, max: usize },

    #[error("shape inconsistency: {0}")]
    Shape(String),

    #[error("non-finite value {0}")]
    NonFinite(String),

    #[error("malformed model file at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("invalid architecture string `{0}`")]
    Architecture(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Successive second-difference estimates never agreed while shrinking the step.
    #[error("second difference did not stabilise down to eps = {eps:e}")]
    EpsilonNotConverged { eps: f64 },

    #[error("reference direction has a vanishing second difference")]
    DegenerateDirection,

    #[error("no active neuron feeds the target layer at this point")]
    NoActiveInputs,

    #[error("inconsistent signature system (relative residual {residual:e})")]
    Inconsistent { residual: f64 },

    #[error("rank-deficient system: rank {rank}, need {needed}")]
    RankDeficient { rank: usize, needed: usize },

    #[error("ground-truth sign mode requires the target's true layer")]
    MissingTruth,

    #[error("extraction failed: {0}")]
    Extraction(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
