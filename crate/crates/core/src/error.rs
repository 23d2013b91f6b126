use thiserror::Error;

/// Errors produced anywhere in the compression stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("corrupt data: {0}")]
    Corruption(String),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("model hash mismatch: container was written with a different {what}")]
    HashMismatch { what: &'static str },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
