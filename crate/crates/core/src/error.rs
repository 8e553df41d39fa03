use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
