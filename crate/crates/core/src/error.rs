use thiserror::Error;

/// Errors raised anywhere in the codec.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A caller violated an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// A symbol fell outside the coder alphabet.
    #[error("range error: symbol {symbol} outside [{min}, {max}]")]
    Range { symbol: i32, min: i32, max: i32 },
    /// The entropy decoder ran out of bytes or saw inconsistent data.
    #[error("decode error: {0}")]
    Decode(String),
    /// A container, checkpoint, config or raw video file is malformed.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}
