use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: axis {axis} is empty or out of range for shape {shape:?}")]
    EmptyAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("attention row {row} has no visible key positions")]
    FullyMaskedRow { row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is detached from every tensor that requires a gradient")]
    DetachedGraph,
    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,
    #[error("ctc target of length {target_len} (needs {required} frames) does not fit in {frames} frames")]
    InfeasibleCtc {
        frames: usize,
        target_len: usize,
        required: usize,
    },
    #[error("label {label} outside alphabet of size {alphabet}")]
    LabelOutOfRange { label: usize, alphabet: usize },
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("cross entropy: every position is ignored")]
    AllIgnored,
    #[error("token id {0} does not map to a language")]
    UnmappedToken(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("unknown utterance id {0:?}")]
    UnknownUtterance(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
