use thiserror::Error;

/// Failure modes shared by every solver and by the CLI.
///
/// The CLI maps `Contract`, `Parse` and `Io` to exit code 2 and `Numeric`
/// to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a precondition: shapes disagree, an infeasible
    /// pattern, a nonpositive learning rate and so on.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A factorization failed or a non-finite value appeared.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(std::io::Error::other(e))
    }
}
