//! Orchestration of whole class-incremental runs and their metrics.

mod config;
mod metrics;
mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    CnnBranch, DatasetSource, FeatureFiles, FeatureOrigin, FusionMode, IngestedBranch,
    ProjectorConfig, RpcaStage, RunConfig, ScenarioConfig, SsfStage, SynthSource,
};
pub use metrics::{
    accuracy, avg_acc, balanced_accuracy, perf_drop, read_report, report, BranchLambda, Failure,
    MetricsReport, RunTimings, TaskReport,
};
pub use run::{build_scenario, run_scenario, RunFailure, RunOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Metric(String),
    #[error("{stage} failed: {message}")]
    Stage { stage: String, message: String },
}

impl HarnessError {
    /// The pipeline stage the error belongs to.
    pub fn stage(&self) -> &str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io { .. } => "io",
            HarnessError::Metric(_) => "metrics",
            HarnessError::Stage { stage, .. } => stage,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
