//! Crate-wide error type and exit-code mapping.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated a documented precondition (shape mismatch, bad
    /// dimension, value out of range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced NaN/Inf or diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An iterative solver hit its iteration budget.
    #[error("no convergence after {iters} iterations: {context}")]
    NonConvergence { context: String, iters: usize },

    /// A certified-contraction precondition does not hold.
    #[error("precondition violation: {0}")]
    Precondition(String),

    /// A required input artifact is not staged.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    /// Process exit code for the CLI: 2 config, 3 numeric, 4 missing input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) | Error::Json { .. } => 2,
            Error::Numeric(_) | Error::NonConvergence { .. } | Error::Precondition(_) => 3,
            Error::MissingPrerequisite(_) => 4,
            Error::Io { source, .. } => {
                if source.kind() == std::io::ErrorKind::NotFound {
                    4
                } else {
                    2
                }
            }
        }
    }

    /// Stable machine-readable kind tag used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::NonConvergence { .. } => "non-convergence",
            Error::Precondition(_) => "precondition",
            Error::MissingPrerequisite(_) => "missing-prerequisite",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
