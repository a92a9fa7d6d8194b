use thiserror::Error;

/// Errors raised by the drifting library.
#[derive(Debug, Error)]
pub enum DriftError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<DriftError>,
    },
}

pub type Result<T> = std::result::Result<T, DriftError>;

impl DriftError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DriftError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DriftError::ShapeMismatch(msg.into())
    }

    /// Wraps the error with a short description of what was being done.
    pub fn context(self, ctx: impl Into<String>) -> Self {
        DriftError::Context {
            context: ctx.into(),
            source: Box::new(self),
        }
    }

    /// True for errors that stem from bad user input (usage/config) rather
    /// than a runtime failure.
    pub fn is_usage(&self) -> bool {
        match self {
            DriftError::InvalidArgument(_)
            | DriftError::ShapeMismatch(_)
            | DriftError::NonFinite(_)
            | DriftError::Format(_)
            | DriftError::Config(_) => true,
            DriftError::Io(_) => false,
            DriftError::Context { source, .. } => source.is_usage(),
        }
    }
}

pub(crate) fn ensure_finite<'a, I>(values: I, what: &'static str) -> Result<()>
where
    I: IntoIterator<Item = &'a f64>,
{
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DriftError::NonFinite(what))
    }
}
