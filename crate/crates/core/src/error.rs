use thiserror::Error;

use crate::taxonomy::{NodeId, TaxonomyError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("label {0} is not part of the taxonomy")]
    UnknownLabel(NodeId),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }

    /// True for failures caused by the content of an input rather than by the
    /// environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}
