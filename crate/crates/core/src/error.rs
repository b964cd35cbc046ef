use thiserror::Error;

/// Crate-wide error type. The CLI maps the variants onto distinct exit
/// codes, so classification here is part of the public contract: `Config`
/// for bad parameters or configuration files, `Data` for malformed or
/// inconsistent measurement inputs, `Numerics` for runtime numerical
/// failures such as stability-guard violations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerics(String),
}

pub type Result<T> = std::result::Result<T, Error>;
