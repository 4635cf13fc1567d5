use std::path::PathBuf;

/// Errors produced across graph construction, execution, pruning and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("node `{node}` references unknown input `{input}`")]
    DanglingInput { node: String, input: String },

    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("unsupported layer kind `{kind}` at node `{node}`")]
    UnknownKind { node: String, kind: String },

    #[error("non-finite value produced by node `{node}`")]
    NonFinite { node: String },

    #[error("unsupported layer `{node}`: {detail}")]
    UnsupportedLayer { node: String, detail: String },

    #[error("unsupported topology at node `{node}`: {detail}")]
    UnsupportedTopology { node: String, detail: String },

    #[error("inconsistent channel plan: {0}")]
    InconsistentPlan(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed manifest {location}: {detail}")]
    MalformedManifest { location: String, detail: String },

    #[error("checksum mismatch for tensor `{name}`")]
    ChecksumMismatch { name: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Divergence { epoch: usize, step: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing artifact `{}`", .0.display())]
    MissingArtifact(PathBuf),

    #[error("I/O error on `{}`: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: &str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            node: node.to_string(),
            detail: detail.into(),
        }
    }
}
