use thiserror::Error;

/// Errors raised by the numerical layers and the data/CLI plumbing.
#[derive(Debug, Error)]
pub enum PopdiffError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The density has (numerically) left its support box or become too flat.
    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("singular operator: {0}")]
    SingularOperator(String),

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("simulation diverged in episode `{episode}` at step {step}")]
    SimulationDivergence { episode: String, step: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("episode `{episode}`: {source}")]
    Episode {
        episode: String,
        #[source]
        source: Box<PopdiffError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PopdiffError {
    /// True for the failures an optimizer may back away from by shrinking its step.
    pub fn is_recoverable(&self) -> bool {
        match self {
            PopdiffError::DegenerateDensity(_)
            | PopdiffError::SingularOperator(_)
            | PopdiffError::Conditioning(_)
            | PopdiffError::InvalidParameter(_)
            | PopdiffError::SimulationDivergence { .. } => true,
            PopdiffError::Episode { source, .. } => source.is_recoverable(),
            _ => false,
        }
    }

    pub(crate) fn in_episode(self, id: &str) -> Self {
        match self {
            e @ PopdiffError::Episode { .. } => e,
            e => PopdiffError::Episode {
                episode: id.to_string(),
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, PopdiffError>;
