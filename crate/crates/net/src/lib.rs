//! End-to-end learned registration network.
//!
//! The pipeline for one pass: per-point descriptors from a hierarchical
//! set-abstraction network ([`featnet`]), saliency scoring and top-N keypoint
//! selection ([`saliency`]), neighborhood embeddings ([`dfe`]), a voxel grid
//! of candidate correspondences scored by a small convolutional network and
//! collapsed to one generated point per keypoint ([`cpg`]), and a weighted
//! SVD pose solve ([`kabsch`]). [`model`] wires the stages together,
//! [`cascade`] runs the front/back pair and bidirectional fusion, and
//! [`train`] fits the parameters.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cascade;
pub mod cpg;
pub mod dfe;
mod error;
pub mod featnet;
pub mod kabsch;
mod layers;
pub mod loss;
pub mod model;
pub mod saliency;
pub mod train;

pub use error::NetError;

pub type Result<T, E = NetError> = std::result::Result<T, E>;

/// Whether a forward pass records training-time behavior (dropout, batch
/// statistics) or runs with frozen statistics.
pub enum Mode<'a> {
    Train(&'a mut rand_chacha::ChaCha8Rng),
    Infer,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}
