use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} elements, found {found}")]
    Length { expected: usize, found: usize },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("value error: {0}")]
    Value(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("window error: bottom {bottom} must be below top {top}")]
    Window { bottom: f32, top: f32 },

    #[error("input error: {0}")]
    Input(String),

    #[error("reconstruction error: imaginary residue {0:e} exceeds tolerance")]
    Reconstruction(f64),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("normalization error: distance {0} in a volume with zero extent")]
    Normalization(f64),

    #[error("schedule error: iteration {iteration} exceeds total {total}")]
    Schedule { iteration: usize, total: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("count error: requested {requested} unlabeled volumes, only {available} available")]
    Count { requested: usize, available: usize },

    #[error("placement error: placed {placed} of {requested} ellipsoids after {attempts} attempts")]
    Placement {
        placed: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Window { .. } | Error::Schedule { .. } => 2,
            Error::Numeric(_) | Error::Reconstruction(_) | Error::Normalization(_) => 4,
            _ => 3,
        }
    }
}
