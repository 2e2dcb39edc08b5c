use std::path::PathBuf;

/// Errors raised anywhere in the pipeline. The variant names the module that
/// failed so front ends can report it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor: {0}")]
    Tensor(String),
    #[error("netspec: {0}")]
    Spec(String),
    #[error("colorlab: {0}")]
    Color(String),
    #[error("anomap: {0}")]
    AnomalyMap(String),
    #[error("leanet: {0}")]
    Model(String),
    #[error("harness: {0}")]
    Harness(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short name of the module that produced the error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Spec(_) => "netspec",
            Error::Color(_) => "colorlab",
            Error::AnomalyMap(_) => "anomap",
            Error::Model(_) => "leanet",
            Error::Harness(_) => "harness",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } | Error::Image { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
