use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward called on non-scalar output with shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($op:expr, $($arg:tt)*) => {
        $crate::error::TensorError::Shape { op: $op, detail: format!($($arg)*) }
    };
}

macro_rules! invalid {
    ($op:expr, $($arg:tt)*) => {
        $crate::error::TensorError::Invalid { op: $op, detail: format!($($arg)*) }
    };
}

pub(crate) use invalid;
pub(crate) use shape_err;
