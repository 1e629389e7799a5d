//! Feature producers: the trainable CNN, the scale-and-shift adapter and
//! ingestion of externally computed features.

mod cnn;
mod features;
mod gradcheck;
mod optim;
mod ssf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::datahub::DataError;

pub use cnn::{
    apply_dropout, cnn_extract, cnn_forward, cnn_init, cnn_train, CnnModel, CnnSample,
    CnnTrainConfig, EpochRecord, TrainHistory, CONV_CHANNELS, CONV_KERNELS, DENSE_INPUT,
    POOLED_SIDES,
};
pub use features::{ingest_features, write_features};
pub use gradcheck::{grad_check, Differentiable};
pub use optim::SgdMomentum;
pub use ssf::{
    ssf_apply, ssf_train, LinearProbe, ProbeBatch, SsfAdapter, SsfProbe, SsfTrainConfig,
};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("{stage}: loss became non-finite in epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize },
    #[error("{path}: line {line}: {msg}")]
    FeatureFile {
        path: std::path::PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: no rows")]
    EmptyFeatureFile { path: std::path::PathBuf },
    #[error("label `{0}` is not one of the classes the model was trained on")]
    UnknownLabel(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Cnn,
    Ingested,
    Adapted,
    Projected,
}

/// One feature vector per row, with the row's class label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: DMatrix<f64>,
    pub labels: Vec<String>,
    pub source: FeatureSource,
}

impl FeatureMatrix {
    pub fn new(rows: DMatrix<f64>, labels: Vec<String>, source: FeatureSource) -> Result<Self> {
        if rows.nrows() != labels.len() {
            return Err(BackboneError::ShapeMismatch {
                expected: format!("{} labels", rows.nrows()),
                found: format!("{} labels", labels.len()),
            });
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(BackboneError::InvalidArgument(
                "non-finite feature value".into(),
            ));
        }
        Ok(Self {
            rows,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            rows: self.rows.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            source: self.source,
        }
    }
}
