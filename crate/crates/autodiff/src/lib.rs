//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the record in reverse and
//! accumulates gradients into a [`ParameterStore`]. The operator set is
//! deliberately closed: affine layers, activations, batch normalization,
//! softmax, set max-pooling, 1D/3D convolutions, a 3×3 SVD, and the
//! reshaping / reduction glue needed to wire them together.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::AutodiffError;
pub use graph::{BatchNormMode, Gradients, Graph, GroupedMlpSpec, Var, BN_EPS, SVD_GAP_EPS};
pub use optim::{Adam, AdamConfig};
pub use params::{ParameterStore, RunningStats};
pub use tensor::Tensor;

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
