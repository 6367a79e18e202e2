use std::path::{Path, PathBuf};

use deepicp_autodiff::AutodiffError;
use deepicp_bench::BenchError;
use deepicp_core::GeomError;
use deepicp_net::NetError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn malformed(path: &Path, detail: impl Into<String>) -> Self {
        Self::Malformed {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }

    /// Short stable identifier of the failure class.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Malformed { .. } => "malformed-input",
            Self::Config(_) => "config",
            Self::Usage(_) => "usage",
            Self::Geometry(_) => "geometry",
            Self::Net(_) => "network",
            Self::Bench(_) => "benchmark",
            Self::Autodiff(_) => "autodiff",
        }
    }

    /// `error <kind>: <message>` on a single line.
    pub fn one_line(&self) -> String {
        let msg: String = self
            .to_string()
            .chars()
            .map(|c| if c.is_control() { ' ' } else { c })
            .collect();
        format!("error {}: {}", self.kind(), msg)
    }
}
