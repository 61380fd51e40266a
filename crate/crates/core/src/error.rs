use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operator received tensors whose shapes break its contract.
    #[error("shape contract violated: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed volume container or checkpoint payload.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(
        "non-finite loss at step {step} (lr {lr:e}, dice {dice}, ce {ce})"
    )]
    NonFiniteLoss { step: usize, lr: f64, dice: f64, ce: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

macro_rules! ensure_shape {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Shape(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_shape;
