use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("malformed {what} at byte offset {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("weights file version {found} is not supported (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Invalid {
        op,
        detail: detail.into(),
    }
}
