use deepicp_autodiff::AutodiffError;
use deepicp_core::GeomError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("cloud has {got} points, at least {need} required")]
    TooFewPoints { got: usize, need: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {snapshot}")]
    NonFiniteLoss { step: usize, snapshot: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
