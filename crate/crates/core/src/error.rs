//! Error type shared across the engine. Operations whose contracts admit no
//! failure return values directly; everything else returns `Result<_, Error>`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfRange { u: u32, v: u32, width: u32, height: u32 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("iso levels must be strictly increasing and non-empty")]
    InvalidLevels,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("upsampling factor {factor} must divide width {width} and height {height}")]
    FactorMismatch { factor: u32, width: u32, height: u32 },

    #[error("operation requires matching cameras: {0}")]
    CameraMismatch(String),

    #[error("samples must be sorted by depth")]
    UnsortedSamples,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }
}
