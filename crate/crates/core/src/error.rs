use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no points within radius {radius} of query")]
    EmptyNeighborhood { radius: f64 },
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },
    #[error("intensity {value} at point {index} outside [0, 1]")]
    Intensity { index: usize, value: f64 },
    #[error("rotation is not orthonormal with det +1 (residual {residual:e})")]
    InvalidRotation { residual: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
