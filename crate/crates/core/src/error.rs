use thiserror::Error;

/// Errors raised by the selection pipeline and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite activation at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("activation matrix has zero samples or zero features")]
    EmptyMatrix,
    #[error("shape mismatch: expected {expected} values, found {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("grid must have at least 2 strictly monotonic values: {0}")]
    InvalidGrid(String),
    #[error("missing activations for layer `{layer}` at grid index {index}")]
    MissingCell { index: usize, layer: String },
    #[error("domain mismatch: expected `{expected}`, found `{found}`")]
    DomainMismatch { expected: String, found: String },
    #[error("grid has {grid} points but {batches} batches were supplied")]
    GridLengthMismatch { grid: usize, batches: usize },
    #[error("omega {omega} does not extend the grid monotonically")]
    NonMonotonicOmega { omega: f64 },
    #[error("layer set mismatch: {0}")]
    LayerSetMismatch(String),
    #[error("trajectories are defined on different grids")]
    GridMismatch,

    #[error("series lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("interval [{i}, {j}] out of range for length {len}")]
    IndexOutOfRange { i: usize, j: usize, len: usize },
    #[error("invalid interval [{i}, {j}]: need i < j <= tau")]
    InvalidInterval { i: usize, j: usize },
    #[error("series too short: tau = {tau}, need tau >= 2")]
    SeriesTooShort { tau: usize },
    #[error("two-sided selection needs >= 3 points per side (valid index {valid}, tau {tau})")]
    SideTooShort { valid: usize, tau: usize },

    #[error("mixture grid is missing the endpoint omega = {0}")]
    EndpointMissing(f64),
    #[error("no mixture grid for candidates `{0}` and `{1}`")]
    MissingPairGrid(String, String),

    #[error("degenerate task spec: {0}")]
    DegenerateSpec(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("bad magic: expected NCAD")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated container: {0}")]
    TruncatedPayload(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
