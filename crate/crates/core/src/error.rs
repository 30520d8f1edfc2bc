use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A forward or backward pass produced NaN/Inf. `layer` is the zero-based
    /// index of the dense layer whose output went non-finite.
    #[error("non-finite value produced at layer {layer}")]
    NonFinite { layer: usize },

    #[error("non-finite {loss} loss")]
    NonFiniteLoss { loss: &'static str },

    #[error("training aborted at step {step}: {loss} is not finite")]
    Aborted { step: u64, loss: &'static str },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

/// Re-labels a network blow-up as a divergence of the named loss.
pub(crate) fn tag_loss(loss: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { loss },
        other => other,
    }
}
