use std::path::PathBuf;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("size error in {op}: {detail}")]
    Size { op: &'static str, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("invalid configuration at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error("conjugate gradient did not converge: residual {residual:.3e} after {iters} iterations")]
    NotConverged { residual: f64, iters: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at iteration {iter} (loss {loss:e}); parameters restored to last good state")]
    Diverged { iter: usize, loss: f64 },

    #[error("rollout produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("degenerate metric: {0}")]
    Degenerate(String),

    #[error("malformed field file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn size(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Size {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
