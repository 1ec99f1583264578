use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants map onto the CLI exit codes: configuration and input problems
/// exit with 2, checkpoint problems with 3, everything else with 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("capacity error: {gt} ground-truth points exceed {proposals} proposals")]
    Capacity { gt: usize, proposals: usize },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
