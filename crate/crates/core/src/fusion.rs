//! Turning branch scores into class decisions.

use thiserror::Error;

use crate::projector::ScoreMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("non-finite score")]
    NonFinite,
    #[error("branch registries differ: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: String,
    pub index: usize,
    /// Over the registry; for late fusion, the summed branch softmaxes halved.
    pub probabilities: Vec<f64>,
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Like [`softmax`], rejecting non-finite scores.
pub fn try_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FusionError::NonFinite);
    }
    Ok(softmax(scores))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn row(m: &ScoreMatrix, i: usize) -> Vec<f64> {
    m.scores.row(i).iter().copied().collect()
}

pub fn late_fuse(l1: &ScoreMatrix, l2: &ScoreMatrix) -> Result<Vec<Prediction>> {
    if l1.classes != l2.classes {
        return Err(FusionError::Mismatch("class registries differ".into()));
    }
    if l1.len() != l2.len() {
        return Err(FusionError::Mismatch(format!(
            "{} vs {} rows",
            l1.len(),
            l2.len()
        )));
    }
    (0..l1.len())
        .map(|i| {
            let s1 = try_softmax(&row(l1, i))?;
            let s2 = try_softmax(&row(l2, i))?;
            let fused: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
            let index = argmax(&fused);
            Ok(Prediction {
                class: l1.classes[index].clone(),
                index,
                probabilities: fused.into_iter().map(|p| p / 2.0).collect(),
            })
        })
        .collect()
}

pub fn single_predict(l: &ScoreMatrix) -> Result<Vec<Prediction>> {
    (0..l.len())
        .map(|i| {
            let scores = row(l, i);
            let probabilities = try_softmax(&scores)?;
            let index = argmax(&scores);
            Ok(Prediction {
                class: l.classes[index].clone(),
                index,
                probabilities,
            })
        })
        .collect()
}

/// A rule combining per-branch scores over a shared registry. Late fusion is the
/// only shipped implementation; feature-level fusion ahead of projection would
/// plug in here.
pub trait BranchFusion {
    fn fuse(&self, branches: &[&ScoreMatrix]) -> Result<Vec<Prediction>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LateFusion;

impl BranchFusion for LateFusion {
    fn fuse(&self, branches: &[&ScoreMatrix]) -> Result<Vec<Prediction>> {
        match branches {
            [only] => single_predict(only),
            [a, b] => late_fuse(a, b),
            _ => Err(FusionError::Mismatch(format!(
                "expected 1 or 2 branches, got {}",
                branches.len()
            ))),
        }
    }
}
