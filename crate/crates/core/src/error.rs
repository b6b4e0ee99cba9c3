use std::io;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("state error: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("format error in `{tensor}`: {msg}")]
    Format { tensor: String, msg: String },

    #[error("non-finite loss at step {step} of block {block}: {loss}")]
    NonFinite { block: usize, step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

pub(crate) fn format_err(tensor: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Format {
        tensor: tensor.into(),
        msg: msg.into(),
    }
}
