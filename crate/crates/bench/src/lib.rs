//! Benchmark plumbing: deterministic synthetic scene pairs, prior
//! perturbation, a point-to-point ICP baseline and an evaluation harness that
//! reports mean/max angular and translational errors.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod eval;
mod icp;
mod perturb;
mod scene;

pub use error::BenchError;
pub use eval::{evaluate, EvalPair, EvalReport};
pub use icp::{icp_point2point, IcpConfig, IcpOutcome};
pub use perturb::{perturb, perturb_seeded, PerturbConfig};
pub use scene::{synth_scene, synth_scenes, Scene, SceneConfig};

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
