use std::path::PathBuf;

/// Errors produced anywhere in the estimation pipeline.
///
/// Every variant maps onto one of the CLI exit-code classes through
/// [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data validation error: {0}")]
    Validation(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("{what} did not converge after {iterations} iterations: {detail}")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        detail: String,
        trace: Vec<String>,
    },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("alpha must lie strictly inside (0, 1), got {0}")]
    AlphaDomain(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes used by the command-line front end.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const NON_CONVERGENCE: i32 = 3;
    pub const VALIDATION: i32 = 4;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::AlphaDomain(_) | Error::Io { .. } | Error::Json(_) => {
                exit::CONFIG
            }
            Error::NonConvergence { .. } => exit::NON_CONVERGENCE,
            Error::Validation(_)
            | Error::SingularDesign(_)
            | Error::Degenerate(_)
            | Error::Dimension(_)
            | Error::Csv { .. } => exit::VALIDATION,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }
}
