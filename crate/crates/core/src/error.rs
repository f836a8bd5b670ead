use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("grid mismatch: {0}")]
    GridMismatch(&'static str),
    #[error("component mismatch: expected {expected}, found {found}")]
    ComponentMismatch { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("blow-up at t = {t}: |u|_s = {norm:e} exceeds {limit:e} (boundedness conditions suspect)")]
    BlowUp { t: f64, norm: f64, limit: f64 },
    #[error("characteristic flow lost monotonicity at t = {t}")]
    NonMonotoneFlow { t: f64 },
    #[error("frequency coordinate crossed zero at t = {t} (point {index})")]
    DegenerateDirection { t: f64, index: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
