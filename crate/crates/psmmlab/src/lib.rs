//! Filesystem, training, evaluation and CLI layers over `psmmlab-core`.
//!
//! Everything with a side effect lives here: the synthetic dataset
//! generator, the on-disk catalog and manifests, batch loading,
//! checkpoint files, the train/eval/report pipelines, and the
//! command-line front end.

pub mod catalog;
pub mod ckpt;
pub mod cli;
pub mod eval;
pub mod loader;
pub mod model;
pub mod pool;
pub mod report;
pub mod synth;
pub mod train;

use std::fmt;

/// Process-level failure classes; each maps onto a fixed exit code.
#[derive(Debug)]
pub enum AppError {
    /// Bad flags, missing or malformed inputs. Exit code 2.
    Input(String),
    /// Non-finite numbers where finite ones are required. Exit code 3.
    Numerical(String),
    /// Artifacts that do not fit the requested configuration. Exit 4.
    Incompatible(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Input(_) => 2,
            AppError::Numerical(_) => 3,
            AppError::Incompatible(_) => 4,
        }
    }

    pub fn input(msg: impl Into<String>) -> AppError {
        AppError::Input(msg.into())
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Input(m) => write!(f, "{m}"),
            AppError::Numerical(m) => write!(f, "numerical failure: {m}"),
            AppError::Incompatible(m) => write!(f, "incompatible artifact: {m}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> AppError {
        AppError::Input(e.to_string())
    }
}

impl From<image::ImageError> for AppError {
    fn from(e: image::ImageError) -> AppError {
        AppError::Input(e.to_string())
    }
}

impl From<psmmlab_core::protocol::ProtocolError> for AppError {
    fn from(e: psmmlab_core::protocol::ProtocolError) -> AppError {
        AppError::Input(e.to_string())
    }
}

impl From<psmmlab_core::graph::GraphError> for AppError {
    fn from(e: psmmlab_core::graph::GraphError) -> AppError {
        AppError::Input(e.to_string())
    }
}

impl From<psmmlab_core::rankpool::RankPoolError> for AppError {
    fn from(e: psmmlab_core::rankpool::RankPoolError) -> AppError {
        AppError::Input(e.to_string())
    }
}

impl From<psmmlab_core::metrics::MetricsError> for AppError {
    fn from(e: psmmlab_core::metrics::MetricsError) -> AppError {
        AppError::Input(e.to_string())
    }
}

impl From<psmmlab_core::psmm::PsmmError> for AppError {
    fn from(e: psmmlab_core::psmm::PsmmError) -> AppError {
        AppError::Input(e.to_string())
    }
}

impl From<psmmlab_core::checkpoint::CheckpointError> for AppError {
    fn from(e: psmmlab_core::checkpoint::CheckpointError) -> AppError {
        AppError::Incompatible(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;
