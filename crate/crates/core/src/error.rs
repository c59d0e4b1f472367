use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dim {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotMatrix { op: String, shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: slice [{start}, {start}+{len}) out of range for size {size}")]
    SliceRange {
        op: String,
        start: usize,
        len: usize,
        size: usize,
    },
    #[error("target id {id} out of range for vocab {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("cross entropy: all positions masked")]
    AllMasked,
    #[error("layer_norm eps must be positive, got {0}")]
    BadEps(f64),
    #[error("dropout probability must be in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("{op}: non-finite value produced at index {index}")]
    NonFinite { op: String, index: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    BackwardNonScalar(Vec<usize>),
    #[error("backward already ran on this loss; run a new forward first")]
    TapeConsumed,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("keep_layers {keep} out of range [1, {total}]")]
    PruneOutOfRange { keep: usize, total: usize },
    #[error("input too short: {got} frames, need at least {need}")]
    TooShortInput { got: usize, need: usize },
    #[error("sequence length {got} exceeds max_seq {max}")]
    SequenceOverflow { got: usize, max: usize },
    #[error("unknown symbol {0:?} for this vocabulary")]
    UnknownSymbol(char),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("schedule: step {step} out of range for {total} total steps")]
    ScheduleRange { step: usize, total: usize },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty reference: WER undefined for utterance {0}")]
    EmptyReference(String),
    #[error("no valid utterance pairs to evaluate")]
    EmptyEvaluation,
    #[error("utterance sets differ between paired cells")]
    PairingMismatch,
    #[error("grid missing required coordinate: {0}")]
    IncompleteGrid(String),
}
