//! Geometry substrate for point cloud registration: clouds, rigid
//! transforms, a kd-tree for radius and nearest-neighbor queries, weighted
//! rigid alignment, and the angular/translational error metrics used to score
//! registrations.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod cloud;
mod error;
mod index;
mod kabsch;
mod metrics;
mod transform;

pub use cloud::{Point, PointCloud};
pub use error::GeomError;
pub use index::SpatialIndex;
pub use kabsch::{weighted_kabsch, KabschSolution};
pub use metrics::{angular_error, translational_error, RegistrationError};
pub use transform::RigidTransform;

pub use nalgebra::{Matrix3, Vector3};

pub type Result<T, E = GeomError> = std::result::Result<T, E>;
