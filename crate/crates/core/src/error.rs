use thiserror::Error;

#[derive(Debug, Error)]
pub enum CasalError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence of length {len} exceeds context window {n_ctx}")]
    ContextOverflow { len: usize, n_ctx: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("empty candidate set after truncation")]
    EmptyCandidates,

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("threshold tau={tau} must exceed k/2 (k={k}) so that known and unknown sets stay disjoint")]
    ThresholdNotDisjoint { tau: usize, k: usize },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("layer mismatch: pack built at layer {pack}, requested layer {requested}")]
    LayerMismatch { pack: usize, requested: usize },

    #[error("{0}")]
    InvalidInput(String),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("bad container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CasalError> = std::result::Result<T, E>;

pub(crate) fn shape_err(what: impl Into<String>, expected: &[usize], got: &[usize]) -> CasalError {
    CasalError::ShapeMismatch {
        what: what.into(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}
