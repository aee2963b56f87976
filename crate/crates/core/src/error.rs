use std::path::PathBuf;

use modseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("modality error: expected {expected}, got {got}")]
    Modality { expected: String, got: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate intensity range in {0}")]
    DegenerateRange(String),
    #[error("non-finite loss at iteration {iter} ({modality} batch {batch}): dice={dice}, ce={ce}")]
    NanLoss { iter: usize, modality: String, batch: usize, dice: f64, ce: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short category name, also used for process exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Index(_) => "index",
            Error::Shape(_) | Error::Tensor(TensorError::Shape { .. }) => "shape",
            Error::Modality { .. } => "modality",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Compatibility(_) => "compatibility",
            Error::Protocol(_) => "protocol",
            Error::Unsupported(_) => "unsupported",
            Error::Parameter(_) => "parameter",
            Error::DegenerateRange(_) => "degenerate-range",
            Error::NanLoss { .. } => "nan-loss",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" | "validation" => 2,
            "io" => 3,
            "format" | "compatibility" => 4,
            "modality" | "shape" | "index" | "parameter" | "tensor" => 5,
            "degenerate-range" => 6,
            "nan-loss" => 7,
            "protocol" | "unsupported" => 8,
            _ => 1,
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
