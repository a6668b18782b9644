use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents do not follow the expected layout.
    #[error("format error in {path}: {field}: {detail}")]
    Format {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    /// Dataset tree does not match the expected `root/<subject>/{full,dNNN}.ptr` layout.
    #[error("dataset layout: {0}")]
    Layout(String),

    /// An operation was called on something it does not apply to (wrong model variant, ...).
    #[error("usage: {0}")]
    Usage(String),

    #[error(
        "non-finite loss at step {step} (lr {lr:.6e}): total {total}, mae {mae}, ssim_loss {ssim_loss}"
    )]
    NonFinite {
        step: usize,
        lr: f64,
        total: f64,
        mae: f64,
        ssim_loss: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, field: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            field,
            detail: detail.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
