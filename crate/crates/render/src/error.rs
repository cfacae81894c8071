use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid asset: {0}")]
    InvalidAsset(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("scene rejected after {iterations} settling iterations: {msg}")]
    SettleFailed { iterations: usize, msg: String },

    #[error("invalid trajectory: {0}")]
    Trajectory(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Core(#[from] clearflow_core::Error),
}

pub type Result<T, E = RenderError> = std::result::Result<T, E>;
