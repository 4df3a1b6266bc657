use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid probability: {0}")]
    InvalidProbability(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("not a permutation of 0..{0}")]
    InvalidPermutation(usize),

    #[error("too many experts for pattern enumeration: {got} > {limit}")]
    TooManyExperts { got: usize, limit: usize },

    #[error("non-finite score at coordinate {0}")]
    NonFinite(usize),

    #[error("infeasible expert pattern: {0}")]
    InfeasiblePattern(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fixture error: {0}")]
    Fixture(String),
}

pub(crate) fn check_index(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index < limit {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { what, index, limit })
    }
}
