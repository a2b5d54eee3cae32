use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The variants map onto the process exit codes used by the CLI:
/// `Config` and `Shape` are caller mistakes (exit 2), `Io` and `Format`
/// are file problems (exit 3), `NonFinite` and `Numeric` are runtime
/// numeric failures (exit 4). `AtStep` wraps a failure with the
/// denoising step and block where it happened.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("step t={t} block {block}: {source}")]
    AtStep {
        t: usize,
        block: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_step(self, t: usize, block: usize) -> Error {
        Error::AtStep {
            t,
            block,
            source: Box::new(self),
        }
    }

    /// Innermost error, unwrapping any step context.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root_cause(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
