use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data integrity: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("feature `{name}` is constant in the training data (std = 0); add it to the drop list")]
    ConstantFeature { name: String },

    #[error("feature mismatch: {0}")]
    FeatureMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss for sample {sample} of the batch")]
    NonFiniteLoss { sample: usize },

    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("ensemble member {member} failed: {source}")]
    Member {
        member: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },

    #[error("degenerate sample: {0}")]
    Degenerate(String),
}

impl Error {
    /// True when the error was caused by bad input rather than a numeric failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Integrity(_)
            | Error::InvalidArgument(_)
            | Error::ConstantFeature { .. }
            | Error::FeatureMismatch(_)
            | Error::Degenerate(_) => true,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::Diverged { .. } => false,
            Error::Member { source, .. } => source.is_input_error(),
        }
    }
}
