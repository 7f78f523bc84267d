use thiserror::Error;

/// Errors surfaced by the engine. Validation failures carry enough context
/// to identify the offending operand or record.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("feature store: missing entry for path={path} step={step} layer={layer}")]
    MissingFeature {
        path: &'static str,
        step: usize,
        layer: u32,
    },

    #[error("feature store: duplicate write for path={path} step={step} layer={layer}")]
    DuplicateFeature {
        path: &'static str,
        step: usize,
        layer: u32,
    },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("controller returned wrong-shaped output at layer {layer}: got {got:?}, expected {expected:?}")]
    ControllerShape {
        layer: u32,
        got: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sampling aborted at step {step}: {msg}")]
    SamplingAbort { step: usize, msg: String },

    #[error("training aborted at step {step}: {msg}")]
    TrainingAbort { step: usize, msg: String },

    #[error("container format: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
