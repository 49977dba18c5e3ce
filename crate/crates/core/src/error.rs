use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("time window [{from}, {to}] outside stream bounds [{t0}, {t1}]")]
    Bounds { from: f64, to: f64, t0: f64, t1: f64 },

    #[error("degenerate time window [{t0}, {t1}]")]
    DegenerateWindow { t0: f64, t1: f64 },

    #[error("invalid event stream: {0}")]
    InvalidStream(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short, stable, machine-parsable name of the error kind.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape-mismatch",
            Error::Bounds { .. } => "bounds",
            Error::DegenerateWindow { .. } => "degenerate-window",
            Error::InvalidStream(_) => "invalid-stream",
            Error::Config(_) => "config",
            Error::Parse(_) => "parse",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing-file",
            Error::Io { .. } => "io",
            Error::NonFinite(_) => "non-finite",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::EmptyDataset => "empty-dataset",
            Error::InvalidArgument(_) => "invalid-argument",
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
