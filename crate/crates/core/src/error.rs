use alloc::string::String;

/// Errors raised by the core crate.
///
/// The variants mirror the failure taxonomy of the command line: data errors,
/// configuration errors, numeric aborts and programming/state errors.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("state error: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("numeric abort at epoch {epoch}, batch {batch}: loss is {loss}")]
    NumericAbort { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Param(alloc::format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(alloc::format!($($arg)*)) };
}
macro_rules! state_err {
    ($($arg:tt)*) => { $crate::error::Error::State(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, data_err, param_err, shape_err, state_err};
