//! Frozen random projection and the streaming ridge-regression prototype engine.
//!
//! Features are rows: a batch `F` (N x d) is projected to `H = relu(F W)`
//! (N x M). Prototypes come from the running statistics `G = sum h h^T` and
//! `C = sum h y^T` as `P = (G + lambda I)^-1 C`; test scores are `H_test P`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{FeatureMatrix, FeatureSource};
use crate::checkpoint::{self, CheckpointError};
use crate::seed;

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("prototypes are stale; solve before scoring")]
    StalePrototypes,
    #[error("G + lambda I is not positive definite at lambda = {lambda}")]
    Factorization { lambda: f64 },
    #[error("validation split of {samples} samples is degenerate")]
    DegenerateSplit { samples: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ProjectorError>;

/// {10^k : k = -8..8}.
pub fn default_lambda_grid() -> Vec<f64> {
    (-8..=8).map(|k| 10f64.powi(k)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionLayer {
    /// d x M, standard Gaussian entries.
    pub w: DMatrix<f64>,
    pub phi: Activation,
}

pub fn init_projection(d: usize, m: usize, seed: u64) -> Result<ProjectionLayer> {
    if d == 0 || m == 0 {
        return Err(ProjectorError::InvalidArgument(format!(
            "projection needs d, M >= 1 (got d={d}, M={m})"
        )));
    }
    let mut rng = seed::rng(seed);
    // filled row by row so the first rows do not depend on M
    let mut w = DMatrix::zeros(d, m);
    for i in 0..d {
        for j in 0..m {
            w[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    Ok(ProjectionLayer {
        w,
        phi: Activation::Relu,
    })
}

impl ProjectionLayer {
    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn project(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        if features.dim() != self.input_dim() {
            return Err(ProjectorError::DimensionMismatch {
                expected: self.input_dim(),
                found: features.dim(),
            });
        }
        let mut h = &features.rows * &self.w;
        let phi = self.phi;
        h.apply(|v| *v = phi.apply(*v));
        Ok(FeatureMatrix {
            rows: h,
            labels: features.labels.clone(),
            source: FeatureSource::Projected,
        })
    }
}

/// Class scores, one row per sample, columns in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub classes: Vec<String>,
    pub scores: DMatrix<f64>,
}

impl ScoreMatrix {
    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.nrows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeState {
    g: DMatrix<f64>,
    c: DMatrix<f64>,
    registry: Vec<String>,
    index: HashMap<String, usize>,
    lambda: Option<f64>,
    p: Option<DMatrix<f64>>,
    stale: bool,
    seed: u64,
}

/// Rows per leaf of the pairwise reduction.
const PAIRWISE_LEAF: usize = 32;

/// `(H^T H, H^T Y)` over `rows`, summed pairwise over halves.
fn pairwise_stats(
    h: &DMatrix<f64>,
    cols: &[usize],
    k: usize,
    rows: std::ops::Range<usize>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = rows.len();
    if n <= PAIRWISE_LEAF {
        let block = h.rows(rows.start, n);
        let g = block.transpose() * block;
        let mut c = DMatrix::zeros(h.ncols(), k);
        for (r, i) in rows.enumerate() {
            let mut col = c.column_mut(cols[i]);
            col += block.row(r).transpose();
        }
        return (g, c);
    }
    let mid = rows.start + n / 2;
    let (g1, c1) = pairwise_stats(h, cols, k, rows.start..mid);
    let (g2, c2) = pairwise_stats(h, cols, k, mid..rows.end);
    (g1 + g2, c1 + c2)
}

fn mirror_upper(g: &mut DMatrix<f64>) {
    let m = g.nrows();
    for j in 0..m {
        for i in j + 1..m {
            g[(i, j)] = g[(j, i)];
        }
    }
}

fn ridge_solve(g: &DMatrix<f64>, c: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(ProjectorError::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let mut a = g.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let chol = Cholesky::new(a).ok_or(ProjectorError::Factorization { lambda })?;
    let p = chol.solve(c);
    if p.iter().any(|v| !v.is_finite()) {
        return Err(ProjectorError::Factorization { lambda });
    }
    Ok(p)
}

impl PrototypeState {
    pub fn new(m: usize, seed: u64) -> Self {
        Self {
            g: DMatrix::zeros(m, m),
            c: DMatrix::zeros(m, 0),
            registry: Vec::new(),
            index: HashMap::new(),
            lambda: None,
            p: None,
            stale: true,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn classes(&self) -> &[String] {
        &self.registry
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn class_sums(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    pub fn prototypes(&self) -> Option<&DMatrix<f64>> {
        self.p.as_ref()
    }

    pub fn is_stale(&self) -> bool {
        self.stale
    }

    fn register(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        let k = self.registry.len();
        self.registry.push(label.to_string());
        self.index.insert(label.to_string(), k);
        let c = std::mem::replace(&mut self.c, DMatrix::zeros(0, 0));
        self.c = c.resize_horizontally(k + 1, 0.0);
        k
    }

    /// Adds a batch of projected features. New labels get zero columns first.
    pub fn accumulate(&mut self, h: &FeatureMatrix) -> Result<()> {
        if h.dim() != self.dim() {
            return Err(ProjectorError::DimensionMismatch {
                expected: self.dim(),
                found: h.dim(),
            });
        }
        if h.is_empty() {
            return Ok(());
        }
        let cols: Vec<usize> = h.labels.iter().map(|l| self.register(l)).collect();
        let (g, c) = pairwise_stats(&h.rows, &cols, self.registry.len(), 0..h.len());
        self.g += g;
        mirror_upper(&mut self.g);
        self.c += c;
        self.stale = true;
        Ok(())
    }

    /// Solves `(G + lambda I) P = C` by Cholesky factorization.
    pub fn solve_prototypes(&mut self, lambda: f64) -> Result<&DMatrix<f64>> {
        let p = ridge_solve(&self.g, &self.c, lambda)?;
        self.lambda = Some(lambda);
        self.p = Some(p);
        self.stale = false;
        Ok(self.p.as_ref().expect("just solved"))
    }

    pub fn score(&self, h_test: &FeatureMatrix) -> Result<ScoreMatrix> {
        let p = match (&self.p, self.stale) {
            (Some(p), false) => p,
            _ => return Err(ProjectorError::StalePrototypes),
        };
        if h_test.dim() != self.dim() {
            return Err(ProjectorError::DimensionMismatch {
                expected: self.dim(),
                found: h_test.dim(),
            });
        }
        Ok(ScoreMatrix {
            classes: self.registry.clone(),
            scores: &h_test.rows * p,
        })
    }

    /// Picks the grid value minimizing validation MSE of one-hot targets, fitting
    /// on the current statistics plus a seeded 80% of `task` and validating on
    /// the rest. Ties go to the smaller value; values whose factorization fails
    /// are skipped. The state itself is not modified.
    pub fn select_lambda(&self, task: &FeatureMatrix, grid: &[f64], seed: u64) -> Result<f64> {
        Ok(self.lambda_curve(task, grid, seed)?.0)
    }

    /// The selected value together with the validation MSE of every grid point
    /// (`None` where the factorization failed), in ascending grid order.
    pub fn lambda_curve(
        &self,
        task: &FeatureMatrix,
        grid: &[f64],
        seed: u64,
    ) -> Result<(f64, Vec<(f64, Option<f64>)>)> {
        if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(ProjectorError::InvalidArgument(
                "lambda grid must be nonempty and positive".into(),
            ));
        }
        if task.dim() != self.dim() {
            return Err(ProjectorError::DimensionMismatch {
                expected: self.dim(),
                found: task.dim(),
            });
        }
        let n = task.len();
        let n_fit = n * 4 / 5;
        if n < 5 || n_fit == n {
            return Err(ProjectorError::DegenerateSplit { samples: n });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed));
        let (fit_idx, val_idx) = order.split_at(n_fit);

        let mut trial = self.clone();
        trial.accumulate(&task.select(fit_idx))?;
        for l in &task.labels {
            trial.register(l);
        }
        let k = trial.registry.len();
        if trial.c.ncols() < k {
            trial.c = trial.c.clone().resize_horizontally(k, 0.0);
        }
        let val = task.select(val_idx);
        let mut targets = DMatrix::zeros(val.len(), k);
        for (r, l) in val.labels.iter().enumerate() {
            targets[(r, trial.index[l])] = 1.0;
        }

        let mut sorted = grid.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let mut curve = Vec::with_capacity(sorted.len());
        let mut best: Option<(f64, f64)> = None;
        for &lambda in &sorted {
            let mse = match ridge_solve(&trial.g, &trial.c, lambda) {
                Ok(p) => {
                    let resid = &val.rows * p - &targets;
                    Some(resid.norm_squared() / resid.len() as f64)
                }
                Err(ProjectorError::Factorization { .. }) => None,
                Err(e) => return Err(e),
            };
            if let Some(mse) = mse {
                if best.is_none_or(|(_, b)| mse < b) {
                    best = Some((lambda, mse));
                }
            }
            curve.push((lambda, mse));
        }
        let (lambda, _) = best.ok_or(ProjectorError::Factorization {
            lambda: sorted[sorted.len() - 1],
        })?;
        Ok((lambda, curve))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let m = self.dim();
        let k = self.registry.len();
        let g = self.g.transpose();
        let c = self.c.transpose();
        let p = self.p.as_ref().map(|p| p.transpose());
        let mut tensors: Vec<(&str, Vec<usize>, &[f64])> = vec![
            ("G", vec![m, m], g.as_slice()),
            ("C", vec![m, k], c.as_slice()),
        ];
        if let Some(p) = &p {
            tensors.push(("P", vec![m, k], p.as_slice()));
        }
        let meta = serde_json::json!({
            "dim": m,
            "registry": self.registry,
            "lambda": self.lambda,
            "stale": self.stale,
            "seed": self.seed,
        });
        checkpoint::save(stem, "prototypes", meta, &tensors)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let ck = checkpoint::load(stem, "prototypes")?;
        let bad = |what: &str| {
            ProjectorError::Checkpoint(CheckpointError::Format {
                path: stem.with_extension("json"),
                msg: format!("missing or invalid `{what}`"),
            })
        };
        let m = ck.meta["dim"].as_u64().ok_or_else(|| bad("dim"))? as usize;
        let registry: Vec<String> =
            serde_json::from_value(ck.meta["registry"].clone()).map_err(|_| bad("registry"))?;
        let k = registry.len();
        let row_major = |name: &str, r: usize, c: usize| -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_row_slice(r, c, ck.tensor(name, &[r, c])?))
        };
        let p = if ck.tensors.contains_key("P") {
            Some(row_major("P", m, k)?)
        } else {
            None
        };
        Ok(Self {
            g: row_major("G", m, m)?,
            c: row_major("C", m, k)?,
            index: registry
                .iter()
                .enumerate()
                .map(|(i, l)| (l.clone(), i))
                .collect(),
            registry,
            lambda: ck.meta["lambda"].as_f64(),
            stale: ck.meta["stale"].as_bool().unwrap_or(true) || p.is_none(),
            p,
            seed: ck.meta["seed"].as_u64().unwrap_or(0),
        })
    }
}
