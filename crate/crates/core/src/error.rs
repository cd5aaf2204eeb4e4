use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or sequence dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced a non-finite value.
    #[error("numeric range error: {0}")]
    NumericRange(String),

    /// Malformed dataset, manifest, or checkpoint content.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid runtime input (bad token id, empty mask, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("io error ({path}): {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Input(_) => 3,
            Error::NumericRange(_) => 4,
            Error::Shape(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
