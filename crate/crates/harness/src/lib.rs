//! Synthetic benchmarks for the refdx engine.
//!
//! [`synth`] draws seeded Gaussian clusters, [`oracle`] holds naive
//! reference implementations that share no code with the engine, and
//! [`experiments`] runs scripted, bit-reproducible experiments that report
//! metrics and pass/fail checks against declared bounds.

pub mod experiments;
pub mod oracle;
pub mod synth;

pub use experiments::{run_experiment, Check, ExperimentReport, Metric, RunOptions, EXPERIMENTS};
pub use synth::{gen_clusters, ClusterData, ClusterSpec};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] refdx_core::Error),
    #[error("placed {placed} of {wanted} centroids after {attempts} attempts")]
    CentroidPlacementFailed { placed: usize, wanted: usize, attempts: usize },
    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("scored set contains a single outcome class")]
    OneClassOnly,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::Core(e) => e.code(),
            HarnessError::CentroidPlacementFailed { .. } => "CENTROID_PLACEMENT_FAILED",
            HarnessError::UnknownExperiment(_) => "UNKNOWN_EXPERIMENT",
            HarnessError::Config(_) => "INVALID_CONFIG",
            HarnessError::OneClassOnly => "ONE_CLASS_ONLY",
            HarnessError::Io(_) => "IO_FAILURE",
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
