use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EacError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EacError {
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("manifest lists no concepts")]
    EmptyConceptSet,
    #[error("concept {id}: mask is {mask_height}x{mask_width}, image is {height}x{width}")]
    DimensionMismatch {
        id: usize,
        mask_height: usize,
        mask_width: usize,
        height: usize,
        width: usize,
    },
    #[error("run lengths sum to {got}, expected {expected}")]
    RleLengthMismatch { expected: usize, got: u128 },
    #[error("run {index} has negative length {value}")]
    NegativeRun { index: usize, value: i64 },

    #[error("missing model artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("consistency probe failed: {0}")]
    ProbeFailure(String),
    #[error("backbone failure: {0}")]
    BackendFailure(String),

    #[error("coalition has {got} players, expected {expected}")]
    CoalitionSizeMismatch { expected: usize, got: usize },
    #[error("concept {0} is already in the coalition")]
    ConceptAlreadyInCoalition(usize),
    #[error("exact enumeration over {n} concepts exceeds the limit of {limit}")]
    TooManyConcepts { n: usize, limit: usize },
    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl EacError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EacError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs rather than by the run itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            EacError::MalformedManifest(_)
                | EacError::EmptyConceptSet
                | EacError::DimensionMismatch { .. }
                | EacError::RleLengthMismatch { .. }
                | EacError::NegativeRun { .. }
                | EacError::MissingArtifact(_)
                | EacError::ShapeMismatch(_)
                | EacError::ProbeFailure(_)
                | EacError::Io { .. }
                | EacError::Json { .. }
                | EacError::Image(_)
        )
    }
}
