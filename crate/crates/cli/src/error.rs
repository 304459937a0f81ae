use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Core(#[from] rgc_core::CoreError),
    #[error("{0}")]
    Other(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn in_stage(self, stage: &'static str) -> PipelineError {
        match self {
            e @ PipelineError::Stage { .. } => e,
            other => PipelineError::Stage { stage, source: Box::new(other) },
        }
    }

    /// CLI exit code: 2 for configuration problems, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
