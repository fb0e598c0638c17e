use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit codes: usage errors map to 1, data/config/file problems to 2,
/// numeric failures (divergence, non-finite values) to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite {what} for parameter {path}")]
    NonFinite { what: &'static str, path: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file: bad magic bytes")]
    CkptMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    CkptVersion { found: u32, expected: u32 },
    #[error("truncated checkpoint: {0}")]
    CkptTruncated(String),
    #[error("checkpoint payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CkptChecksum { stored: u32, computed: u32 },
    #[error("checkpoint shape mismatch at {path}: file has {found:?}, config expects {expected:?}")]
    CkptShape {
        path: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint manifest error: {0}")]
    CkptManifest(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::NonFinite { .. } | Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
