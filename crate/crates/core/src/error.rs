use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("principal matrix logarithm undefined (eigenvalue on the closed negative real axis)")]
    LogUndefined,
    #[error("plastic strain is not invertible")]
    SingularP,
    #[error("matrix is not in SL(3): |det - 1| = {0:e}")]
    NotInSL3(f64),
    #[error("cached gradients are stale; call refresh() first")]
    StaleCache,
    #[error("invalid exponents: {0}")]
    InvalidExponents(String),
    #[error("energy density not stationary at identity: {0}")]
    NonStationaryIdentity(String),
    #[error("indefinite Hessian: {0}")]
    IndefiniteHessian(String),
    #[error("insufficient growth: {0}")]
    InsufficientGrowth(String),
    #[error("invalid flow constants: {0}")]
    InvalidFlowConstants(String),
    #[error("plastic potential gradient degenerate (|dev(N P^T)| ~ 0) with nonzero rate")]
    DegenerateGradient,
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("window [{start}, {end}] outside trajectory steps 0..={last}")]
    WindowOutOfRange { start: usize, end: usize, last: usize },
    #[error("history too short: need {needed} entries, have {have}")]
    HistoryTooShort { needed: usize, have: usize },
    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("time {0} outside load table range")]
    TimeOutOfRange(f64),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
