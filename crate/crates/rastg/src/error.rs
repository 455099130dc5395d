use std::path::{Path, PathBuf};

/// Failures surfaced by file formats, pipelines and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("layout error in {path}: {reason}")]
    Layout { path: PathBuf, reason: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rastg_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Self::MissingFile(path.as_ref().to_path_buf());
        }
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.as_ref().to_path_buf(),
            reason: reason.into(),
        }
    }

    /// Short stable category used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        use rastg_core::Error as C;
        match self {
            Self::Io { .. } => "io",
            Self::MissingFile(_) => "missing-file",
            Self::Format { .. } => "format",
            Self::Layout { .. } => "layout",
            Self::Usage(_) => "usage",
            Self::Core(e) => match e {
                C::Config(_) => "config",
                C::Numeric(_) | C::NonFiniteLoss { .. } => "numeric",
                C::Graph(_) => "graph",
                C::Data(_) => "data",
                _ => "contract",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        use rastg_core::Error as C;
        match self {
            Self::Usage(_) | Self::Core(C::Config(_)) => exit::USAGE,
            Self::Core(C::Numeric(_) | C::NonFiniteLoss { .. }) => exit::NUMERIC,
            _ => exit::DATA,
        }
    }
}
