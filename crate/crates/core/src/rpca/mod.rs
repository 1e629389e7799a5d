//! Low-rank plus sparse image decomposition.
//!
//! The learned denoiser is a two-layer linear map `L = A B x` (rank `r`) trained
//! to make the residual `x - L` as sparse as possible under a smoothed L1 loss.
//! The residual is the filtered image. [`pcp`] holds classical principal
//! component pursuit, used to check the learned subspace.

pub mod pcp;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::Differentiable;
use crate::checkpoint::{self, CheckpointError};
use crate::datahub::Image;
use crate::seed;

pub use pcp::{pcp_oracle, PcpOutput, PcpParams};

#[derive(Debug, Error)]
pub enum RpcaError {
    #[error("rank {rank} must be in 1..{m}")]
    InvalidRank { rank: usize, m: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("vector of length {found} does not match model length {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("principal component pursuit stopped after {iterations} iterations at relative residual {residual:.3e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, RpcaError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpcaTrainConfig {
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Smoothing of |u| as sqrt(u^2 + eps^2) - eps.
    pub epsilon: f64,
    #[serde(default)]
    pub optimizer: RpcaOptimizer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RpcaOptimizer {
    /// Plain mini-batch gradient descent with a fixed step.
    #[default]
    Sgd,
    /// Adam (beta1 0.9, beta2 0.999); insensitive to the window size.
    Adam,
}

impl std::str::FromStr for RpcaOptimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            )),
        }
    }
}

struct Adam {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;

    fn new(shape: (usize, usize)) -> Self {
        Self {
            m: DMatrix::zeros(shape.0, shape.1),
            v: DMatrix::zeros(shape.0, shape.1),
            t: 0,
        }
    }

    fn step(&mut self, param: &mut DMatrix<f64>, grad: &DMatrix<f64>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
        }
    }
}

impl Default for RpcaTrainConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            epochs: 300,
            lr: 0.03,
            batch_size: 16,
            epsilon: 1e-4,
            optimizer: RpcaOptimizer::Sgd,
        }
    }
}

/// Bilinear low-rank map with `a: m x r` and `b: r x m`.
#[derive(Clone, Debug, PartialEq)]
pub struct RpcaModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub epsilon: f64,
    /// Mean per-entry loss before training, then after each epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedImage {
    pub original: DVector<f64>,
    pub low_rank: DVector<f64>,
    pub sparse: DVector<f64>,
}

/// Sparse component rescaled to [0,1] for export; `value = pixel * scale + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportScale {
    pub offset: f64,
    pub scale: f64,
}

#[inline]
fn smooth_abs(u: f64, eps: f64) -> f64 {
    (u * u + eps * eps).sqrt() - eps
}

#[inline]
fn smooth_abs_grad(u: f64, eps: f64) -> f64 {
    u / (u * u + eps * eps).sqrt()
}

impl RpcaModel {
    pub fn new(m: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 || rank >= m {
            return Err(RpcaError::InvalidRank { rank, m });
        }
        let normal = Normal::new(0.0, (1.0 / m as f64).sqrt()).expect("valid std");
        let mut rng = seed::rng(seed);
        let a = DMatrix::from_fn(m, rank, |_, _| normal.sample(&mut rng));
        let b = DMatrix::from_fn(rank, m, |_, _| normal.sample(&mut rng));
        Ok(Self {
            a,
            b,
            epsilon: 1e-4,
            loss_history: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.nrows() == 0
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    /// Side of the square window, if `m` is a perfect square.
    pub fn window_side(&self) -> Option<usize> {
        let m = self.len();
        let side = (m as f64).sqrt().round() as usize;
        (side * side == m).then_some(side)
    }

    pub fn low_rank(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * (&self.b * x)
    }

    /// Smoothed-L1 residual averaged over every entry of `batch` (columns are images).
    pub fn loss(&self, batch: &DMatrix<f64>) -> f64 {
        let residual = batch - &self.a * (&self.b * batch);
        let total: f64 = residual.iter().map(|&u| smooth_abs(u, self.epsilon)).sum();
        total / batch.len().max(1) as f64
    }

    /// Loss and gradients with respect to `a` and `b` for the columns of `batch`.
    pub fn loss_and_grad(&self, batch: &DMatrix<f64>) -> (f64, DMatrix<f64>, DMatrix<f64>) {
        let n = batch.len().max(1) as f64;
        let z = &self.b * batch;
        let residual = batch - &self.a * &z;
        let loss: f64 = residual
            .iter()
            .map(|&u| smooth_abs(u, self.epsilon))
            .sum::<f64>()
            / n;
        let g = residual.map(|u| smooth_abs_grad(u, self.epsilon));
        let grad_a = -(&g * z.transpose()) / n;
        let grad_b = -((self.a.transpose() * &g) * batch.transpose()) / n;
        (loss, grad_a, grad_b)
    }

    pub fn apply(&self, image: &[f64]) -> Result<DecomposedImage> {
        if image.len() != self.len() {
            return Err(RpcaError::LengthMismatch {
                expected: self.len(),
                found: image.len(),
            });
        }
        let original = DVector::from_column_slice(image);
        let low_rank = self.low_rank(&original);
        let sparse = &original - &low_rank;
        Ok(DecomposedImage {
            original,
            low_rank,
            sparse,
        })
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (m, r) = (self.len(), self.rank());
        // nalgebra storage is column-major; tensors are stored row-major
        let a = self.a.transpose();
        let b = self.b.transpose();
        checkpoint::save(
            stem,
            "rpca",
            serde_json::json!({
                "m": m,
                "rank": r,
                "window_side": self.window_side(),
                "epsilon": self.epsilon,
                "loss_history": self.loss_history,
            }),
            &[
                ("a", vec![m, r], a.as_slice()),
                ("b", vec![r, m], b.as_slice()),
            ],
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let ck = checkpoint::load(stem, "rpca")?;
        let dim = |key: &str| {
            ck.meta[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| RpcaError::InvalidArgument(format!("checkpoint lacks `{key}`")))
        };
        let (m, r) = (dim("m")?, dim("rank")?);
        let a = DMatrix::from_row_slice(m, r, ck.tensor("a", &[m, r])?);
        let b = DMatrix::from_row_slice(r, m, ck.tensor("b", &[r, m])?);
        let epsilon = ck.meta["epsilon"].as_f64().unwrap_or(1e-4);
        let loss_history =
            serde_json::from_value(ck.meta["loss_history"].clone()).unwrap_or_default();
        Ok(Self {
            a,
            b,
            epsilon,
            loss_history,
        })
    }
}

/// Flat parameters are `a` then `b`, each column-major; samples are column batches.
impl Differentiable for RpcaModel {
    type Sample = DMatrix<f64>;

    fn param_groups(&self) -> Vec<usize> {
        vec![self.a.len(), self.b.len()]
    }

    fn param(&self, index: usize) -> f64 {
        let na = self.a.len();
        if index < na {
            self.a.as_slice()[index]
        } else {
            self.b.as_slice()[index - na]
        }
    }

    fn set_param(&mut self, index: usize, value: f64) {
        let na = self.a.len();
        if index < na {
            self.a.as_mut_slice()[index] = value;
        } else {
            self.b.as_mut_slice()[index - na] = value;
        }
    }

    fn loss(&self, batch: &DMatrix<f64>) -> f64 {
        RpcaModel::loss(self, batch)
    }

    fn loss_and_grad(&self, batch: &DMatrix<f64>) -> (f64, Vec<f64>) {
        let (loss, ga, gb) = RpcaModel::loss_and_grad(self, batch);
        let mut grad = ga.as_slice().to_vec();
        grad.extend_from_slice(gb.as_slice());
        (loss, grad)
    }
}

impl DecomposedImage {
    /// Sparse component as a `side x side` image, affinely rescaled to [0,1].
    pub fn sparse_export(&self, side: usize) -> (Image, ExportScale) {
        let lo = self.sparse.min();
        let hi = self.sparse.max();
        let range = hi - lo;
        let pixels: Vec<f64> = if range > 0.0 {
            self.sparse.iter().map(|v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.sparse.len()]
        };
        let image = Image::new(side, side, pixels).expect("finite rescaled pixels");
        (
            image,
            ExportScale {
                offset: lo,
                scale: range,
            },
        )
    }

    /// Sparse component as an unclamped `side x side` image (internal use).
    pub fn sparse_image(&self, side: usize) -> Image {
        Image::new(side, side, self.sparse.as_slice().to_vec()).expect("finite sparse component")
    }
}

/// Packs equal-length vectors as the columns of a matrix.
pub fn stack_columns(images: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = images
        .first()
        .map(Vec::len)
        .ok_or_else(|| RpcaError::InvalidArgument("no training images".into()))?;
    if let Some(bad) = images.iter().find(|x| x.len() != m) {
        return Err(RpcaError::LengthMismatch {
            expected: m,
            found: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(m, images.len(), |i, j| images[j][i]))
}

/// Mini-batch gradient descent on the smoothed L1 residual.
pub fn rpca_train(images: &[Vec<f64>], config: &RpcaTrainConfig, seed: u64) -> Result<RpcaModel> {
    if !(config.lr > 0.0 && config.lr.is_finite()) {
        return Err(RpcaError::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            config.lr
        )));
    }
    if config.batch_size == 0 || !(config.epsilon > 0.0) {
        return Err(RpcaError::InvalidArgument(
            "batch size and smoothing must be positive".into(),
        ));
    }
    let data = stack_columns(images)?;
    let mut model = RpcaModel::new(data.nrows(), config.rank, seed::derive(seed, "rpca-init"))?;
    model.epsilon = config.epsilon;
    model.loss_history.push(model.loss(&data));

    let mut rng = seed::rng(seed::derive(seed, "rpca-shuffle"));
    let mut order: Vec<usize> = (0..data.ncols()).collect();
    let mut adam = (Adam::new(model.a.shape()), Adam::new(model.b.shape()));
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select_columns(chunk);
            let (_, grad_a, grad_b) = model.loss_and_grad(&batch);
            match config.optimizer {
                RpcaOptimizer::Sgd => {
                    model.a -= grad_a * config.lr;
                    model.b -= grad_b * config.lr;
                }
                RpcaOptimizer::Adam => {
                    adam.0.step(&mut model.a, &grad_a, config.lr);
                    adam.1.step(&mut model.b, &grad_b, config.lr);
                }
            }
        }
        let loss = model.loss(&data);
        if !loss.is_finite() {
            return Err(RpcaError::Diverged { epoch });
        }
        model.loss_history.push(loss);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_must_be_below_length() {
        assert!(matches!(
            RpcaModel::new(4, 4, 0),
            Err(RpcaError::InvalidRank { .. })
        ));
        assert!(matches!(
            RpcaModel::new(4, 0, 0),
            Err(RpcaError::InvalidRank { .. })
        ));
        let cfg = RpcaTrainConfig {
            rank: 9,
            ..Default::default()
        };
        assert!(rpca_train(&[vec![0.0; 9]], &cfg, 0).is_err());
    }

    #[test]
    fn zero_images_have_zero_loss_and_stay_put() {
        let cfg = RpcaTrainConfig {
            rank: 2,
            epochs: 3,
            ..Default::default()
        };
        let images = vec![vec![0.0; 16]; 5];
        let model = rpca_train(&images, &cfg, 1).unwrap();
        assert!(model.loss_history.iter().all(|&l| l == 0.0));
        let untouched = RpcaModel::new(16, 2, seed::derive(1, "rpca-init")).unwrap();
        assert_eq!(model.a, untouched.a);
        let d = model.apply(&images[0]).unwrap();
        assert!(d.low_rank.iter().all(|&v| v == 0.0));
        assert!(d.sparse.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_map_leaves_no_sparse_part() {
        // square a = b = I is outside the r < m contract; only used to exercise apply
        let model = RpcaModel {
            a: DMatrix::identity(4, 4),
            b: DMatrix::identity(4, 4),
            epsilon: 1e-4,
            loss_history: vec![],
        };
        let x = [0.1, 0.7, 0.3, 0.9];
        let d = model.apply(&x).unwrap();
        assert_eq!(d.low_rank.as_slice(), &x);
        assert!(d.sparse.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn additivity_is_exact_and_length_checked() {
        let model = RpcaModel::new(9, 2, 5).unwrap();
        let x: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = model.apply(&x).unwrap();
        for i in 0..9 {
            assert_eq!(d.original[i] - d.low_rank[i] - d.sparse[i], 0.0);
        }
        assert!(matches!(
            model.apply(&x[..8]),
            Err(RpcaError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn export_rescales_to_unit_range() {
        let d = DecomposedImage {
            original: DVector::zeros(4),
            low_rank: DVector::zeros(4),
            sparse: DVector::from_vec(vec![-1.0, 0.0, 1.0, 3.0]),
        };
        let (img, scale) = d.sparse_export(2);
        assert_eq!(img.pixels(), &[0.0, 0.25, 0.5, 1.0]);
        assert_eq!(
            scale,
            ExportScale {
                offset: -1.0,
                scale: 4.0
            }
        );
        for (p, v) in img.pixels().iter().zip(d.sparse.iter()) {
            assert!((p * scale.scale + scale.offset - v).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = RpcaModel::new(16, 3, 2).unwrap();
        model.loss_history = vec![2.0, 1.0];
        model.save(&dir.path().join("rpca")).unwrap();
        let back = RpcaModel::load(&dir.path().join("rpca")).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.window_side(), Some(4));
    }
}
