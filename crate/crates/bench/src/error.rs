use deepicp_core::GeomError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error("no correspondences within {max_pair_dist} m at iteration {iteration}")]
    NoOverlap { max_pair_dist: f64, iteration: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pair {id}: {reason}")]
    Method { id: String, reason: String },
    #[error("evaluation set is empty")]
    EmptyEvaluation,
}
