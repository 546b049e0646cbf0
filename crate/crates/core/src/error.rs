use thiserror::Error;

/// Errors raised by the control toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller handed in data that violates an operation's preconditions.
    #[error("input contract violated: {0}")]
    Contract(String),

    /// Vector or matrix shapes do not line up.
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// A numeric precondition failed (non-finite value, singular or indefinite matrix).
    #[error("numeric contract violated: {0}")]
    Numeric(String),

    #[error("malformed record at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            found,
        })
    }
}
