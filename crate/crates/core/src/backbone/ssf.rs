//! Scale-and-shift feature adaptation `x_o = gamma * x_in + delta`, trained on
//! base-task features through a disposable linear probe.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::optim::SgdMomentum;
use super::{BackboneError, Differentiable, FeatureMatrix, FeatureSource, Result};
use crate::checkpoint;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct SsfAdapter {
    pub gamma: DVector<f64>,
    pub delta: DVector<f64>,
}

impl SsfAdapter {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: DVector::from_element(dim, 1.0),
            delta: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn apply_rows(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rows.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (g, d) = (self.gamma[j], self.delta[j]);
            col.apply(|v| *v = g * *v + d);
        }
        out
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let d = self.dim();
        checkpoint::save(
            stem,
            "ssf",
            serde_json::json!({ "dim": d }),
            &[
                ("gamma", vec![d], self.gamma.as_slice()),
                ("delta", vec![d], self.delta.as_slice()),
            ],
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let ck = checkpoint::load(stem, "ssf")?;
        let d = ck.meta["dim"]
            .as_u64()
            .ok_or_else(|| BackboneError::InvalidArgument("ssf checkpoint lacks dim".into()))?
            as usize;
        Ok(Self {
            gamma: DVector::from_column_slice(ck.tensor("gamma", &[d])?),
            delta: DVector::from_column_slice(ck.tensor("delta", &[d])?),
        })
    }
}

pub fn ssf_apply(adapter: &SsfAdapter, features: &FeatureMatrix) -> Result<FeatureMatrix> {
    if features.dim() != adapter.dim() {
        return Err(BackboneError::ShapeMismatch {
            expected: format!("{} feature columns", adapter.dim()),
            found: format!("{}", features.dim()),
        });
    }
    Ok(FeatureMatrix {
        rows: adapter.apply_rows(&features.rows),
        labels: features.labels.clone(),
        source: FeatureSource::Adapted,
    })
}

/// Multinomial logistic regression `softmax(x W + b)`, `W: d x K`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Feature rows with class indices into the probe's outputs.
#[derive(Clone, Debug)]
pub struct ProbeBatch {
    pub rows: DMatrix<f64>,
    pub targets: Vec<usize>,
}

impl LinearProbe {
    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut rng = seed::rng(seed);
        Self {
            weight: DMatrix::from_fn(dim, classes, |_, _| normal.sample(&mut rng)),
            bias: DVector::zeros(classes),
        }
    }

    fn logits(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = rows * &self.weight;
        for mut row in z.row_iter_mut() {
            row += self.bias.transpose();
        }
        z
    }

    /// Mean cross-entropy, gradient with respect to the logits, and accuracy.
    fn cross_entropy(&self, rows: &DMatrix<f64>, targets: &[usize]) -> (f64, DMatrix<f64>, f64) {
        let mut z = self.logits(rows);
        let n = rows.nrows().max(1) as f64;
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (i, mut row) in z.row_iter_mut().enumerate() {
            let max = row.max();
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            correct += (best == targets[i]) as usize;
            row.apply(|v| *v = (*v - max).exp());
            let sum = row.sum();
            loss += sum.ln() - row[targets[i]].ln();
            row /= sum;
            row[targets[i]] -= 1.0;
            row /= n;
        }
        (loss / n, z, correct as f64 / n)
    }

    pub fn accuracy(&self, rows: &DMatrix<f64>, targets: &[usize]) -> f64 {
        self.cross_entropy(rows, targets).2
    }
}

impl Differentiable for LinearProbe {
    type Sample = ProbeBatch;

    fn param_groups(&self) -> Vec<usize> {
        vec![self.weight.len(), self.bias.len()]
    }

    fn param(&self, index: usize) -> f64 {
        let nw = self.weight.len();
        if index < nw {
            self.weight.as_slice()[index]
        } else {
            self.bias[index - nw]
        }
    }

    fn set_param(&mut self, index: usize, value: f64) {
        let nw = self.weight.len();
        if index < nw {
            self.weight.as_mut_slice()[index] = value;
        } else {
            self.bias[index - nw] = value;
        }
    }

    fn loss(&self, batch: &ProbeBatch) -> f64 {
        self.cross_entropy(&batch.rows, &batch.targets).0
    }

    fn loss_and_grad(&self, batch: &ProbeBatch) -> (f64, Vec<f64>) {
        let (loss, dz, _) = self.cross_entropy(&batch.rows, &batch.targets);
        let gw = batch.rows.transpose() * &dz;
        let gb = dz.row_sum().transpose();
        let mut grad = gw.as_slice().to_vec();
        grad.extend_from_slice(gb.as_slice());
        (loss, grad)
    }
}

/// An adapter and the probe it is trained through.
#[derive(Clone, Debug, PartialEq)]
pub struct SsfProbe {
    pub adapter: SsfAdapter,
    pub probe: LinearProbe,
}

impl Differentiable for SsfProbe {
    type Sample = ProbeBatch;

    fn param_groups(&self) -> Vec<usize> {
        let d = self.adapter.dim();
        let mut g = vec![d, d];
        g.extend(self.probe.param_groups());
        g
    }

    fn param(&self, index: usize) -> f64 {
        let d = self.adapter.dim();
        match index {
            i if i < d => self.adapter.gamma[i],
            i if i < 2 * d => self.adapter.delta[i - d],
            i => self.probe.param(i - 2 * d),
        }
    }

    fn set_param(&mut self, index: usize, value: f64) {
        let d = self.adapter.dim();
        match index {
            i if i < d => self.adapter.gamma[i] = value,
            i if i < 2 * d => self.adapter.delta[i - d] = value,
            i => self.probe.set_param(i - 2 * d, value),
        }
    }

    fn loss(&self, batch: &ProbeBatch) -> f64 {
        let adapted = self.adapter.apply_rows(&batch.rows);
        self.probe.cross_entropy(&adapted, &batch.targets).0
    }

    fn loss_and_grad(&self, batch: &ProbeBatch) -> (f64, Vec<f64>) {
        let adapted = self.adapter.apply_rows(&batch.rows);
        let (loss, dz, _) = self.probe.cross_entropy(&adapted, &batch.targets);
        let gw = adapted.transpose() * &dz;
        let gb = dz.row_sum().transpose();
        // d loss / d adapted
        let dx = &dz * self.probe.weight.transpose();
        let ggamma = dx.component_mul(&batch.rows).row_sum().transpose();
        let gdelta = dx.row_sum().transpose();
        let mut grad = ggamma.as_slice().to_vec();
        grad.extend_from_slice(gdelta.as_slice());
        grad.extend_from_slice(gw.as_slice());
        grad.extend_from_slice(gb.as_slice());
        (loss, grad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsfTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Train gamma and delta; when false only the probe learns (baseline arm).
    #[serde(default = "default_true")]
    pub train_adapter: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for SsfTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            train_adapter: true,
            seed: 0,
        }
    }
}

/// Trains an identity-initialized adapter and a throwaway probe on base-task
/// features. Returns the frozen adapter together with the probe (for diagnostics).
pub fn ssf_train(
    base_features: &FeatureMatrix,
    config: &SsfTrainConfig,
) -> Result<(SsfAdapter, LinearProbe)> {
    let mut classes: Vec<&str> = Vec::new();
    for l in &base_features.labels {
        if !classes.contains(&l.as_str()) {
            classes.push(l);
        }
    }
    if classes.is_empty() {
        return Err(BackboneError::InvalidArgument("no base features".into()));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(BackboneError::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let targets: Vec<usize> = base_features
        .labels
        .iter()
        .map(|l| classes.iter().position(|c| c == l).expect("registered"))
        .collect();
    let d = base_features.dim();
    let mut model = SsfProbe {
        adapter: SsfAdapter::identity(d),
        probe: LinearProbe::new(d, classes.len(), seed::derive(config.seed, "ssf-probe")),
    };
    let n_params: usize = model.param_groups().iter().sum();
    let mut opt = SgdMomentum::new(n_params, config.lr, config.momentum, 0.0);
    let mut params: Vec<f64> = (0..n_params).map(|i| model.param(i)).collect();
    let mut order: Vec<usize> = (0..base_features.len()).collect();
    let mut rng = seed::rng(seed::derive(config.seed, "ssf-shuffle"));
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = ProbeBatch {
                rows: base_features.rows.select_rows(chunk),
                targets: chunk.iter().map(|&i| targets[i]).collect(),
            };
            let (loss, mut grad) = model.loss_and_grad(&batch);
            if !loss.is_finite() {
                return Err(BackboneError::Diverged {
                    stage: "ssf_train",
                    epoch,
                });
            }
            if !config.train_adapter {
                grad[..2 * d].fill(0.0);
            }
            opt.step(&mut params, &grad);
            for (i, &p) in params.iter().enumerate() {
                model.set_param(i, p);
            }
        }
    }
    Ok((model.adapter, model.probe))
}
