//! Dataset ingestion (frame binaries, pose files, pair enumeration), PLY
//! export, `key = value` configuration, checkpoints and the commands of the
//! `deepicp` binary.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod dataset;
mod error;
pub mod frame;
pub mod model_io;
pub mod pairs;
pub mod ply;
pub mod poses;

pub use error::CliError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;
