use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
///
/// Variants map onto the CLI exit codes: contract/validation problems are
/// exit 2, backend problems exit 3, optimizer failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (mismatched dimensions, bad
    /// parameter range, type invariant).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The input is well-formed but carries too little information for the
    /// requested estimate (constant depth, too few points, empty mask).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An iterative optimizer diverged or could not find a feasible start.
    /// `best_loss` is the best objective reached before giving up.
    #[error("optimization failed: {message} (best loss {best_loss})")]
    Optimization { message: String, best_loss: f64 },

    /// A pose did not converge and the caller did not force composition.
    #[error("non-convergence: {0}")]
    NonConvergence(String),

    /// Input files or manifests failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A pipeline stage was asked to run before its upstream stage.
    #[error("missing upstream artifact {artifact}: run stage `{stage}` first")]
    MissingStage { stage: String, artifact: PathBuf },

    /// A backend job failed, is still pending, or is unknown.
    #[error("backend: {0}")]
    Backend(String),

    #[error("unknown backend job id {0}")]
    UnknownJob(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend(_) | Error::UnknownJob(_) => 3,
            Error::Optimization { .. } | Error::NonConvergence(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
