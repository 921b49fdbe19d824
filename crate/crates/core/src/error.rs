use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("cannot reduce an empty set")]
    EmptySet,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed file {}: {msg}", path.display())]
    MalformedFile { path: PathBuf, msg: String },
    #[error("dataset contains no pairs")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Variant name, for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::EmptyCloud => "EmptyCloud",
            Error::EmptySet => "EmptySet",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::MalformedFile { .. } => "MalformedFile",
            Error::EmptyDataset => "EmptyDataset",
            Error::Config(_) => "Config",
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) => "Io",
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
