use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("config error: unknown key `{0}`")]
    UnknownConfigKey(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Format(String),

    #[error("unexpected end of file while reading {0}")]
    UnexpectedEnd(String),

    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),

    #[error("variant mismatch: checkpoint holds `{found}`, expected `{expected}`")]
    VariantMismatch { found: String, expected: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
