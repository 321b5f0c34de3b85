use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor size overflows usize for dims {0:?}")]
    SizeOverflow([usize; 4]),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("coordinate ({y}, {x}) is outside the valid output region")]
    OutOfBounds { y: usize, x: usize },

    #[error("enumeration intractable: {paths} paths exceeds guard {guard}")]
    Intractable { paths: f64, guard: f64 },

    #[error("unknown gradcheck op `{0}`")]
    UnknownOp(String),

    #[error("config: {0}")]
    Config(String),

    #[error("divergence: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
