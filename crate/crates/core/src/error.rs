use thiserror::Error;

/// Errors raised anywhere in the simulation stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FabError {
    /// Invalid user-supplied configuration (bad parameters, malformed files).
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs violate a mathematical precondition (dimension mismatch,
    /// non-stochastic weights, singular Hessian, graph not strongly connected).
    #[error("domain error: {0}")]
    Domain(String),

    /// The problem does not expose the oracle required by the operation.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A non-finite value appeared in the iterates.
    #[error("numerical divergence at iteration {iteration} (agent {agent}, variable {variable})")]
    Divergence {
        iteration: u64,
        agent: usize,
        variable: &'static str,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for FabError {
    fn from(e: std::io::Error) -> Self {
        FabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FabError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(FabError::Config(msg.into()))
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(FabError::Domain(msg.into()))
}
