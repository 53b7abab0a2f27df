use thiserror::Error;

/// Crate-wide error type. The variants double as the CLI's exit-status
/// categories, so keep usage-class, data-class, and runtime-fault errors
/// separate.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown key, unparsable value, inconsistent setup.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or insufficient input data (price files, instance files).
    #[error("data error: {0}")]
    Ingestion(String),
    /// A caller broke an API contract (infeasible action, dimension mismatch).
    #[error("contract violation: {0}")]
    Contract(String),
    /// The simulator detected an impossible situation (e.g. a missed departure).
    #[error("simulator fault: {0}")]
    Fault(String),
    /// Training diverged or produced non-finite values.
    #[error("training fault: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
