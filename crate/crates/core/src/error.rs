use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("bounds incompatible with network: {0}")]
    BoundsMismatch(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("margin estimation error: {0}")]
    Margin(String),

    #[error("mitigation aborted at iteration {iteration}: non-finite loss")]
    MitigationAborted {
        iteration: usize,
        /// Per-iteration records collected before the abort.
        history: Vec<crate::mitigation::IterationRecord>,
    },

    #[error("defense error: {0}")]
    Defense(String),

    #[error("experiment stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
