//! Principal component pursuit by the inexact augmented Lagrangian method:
//! singular value thresholding on the low-rank part alternating with
//! elementwise soft thresholding on the sparse part.

use nalgebra::DMatrix;

use super::{Result, RpcaError};

#[derive(Clone, Debug, PartialEq)]
pub struct PcpParams {
    /// Penalty parameter of the augmented Lagrangian.
    pub mu: f64,
    /// Growth factor applied to `mu` after each iteration (1 keeps it fixed).
    pub mu_growth: f64,
    /// Weight of the L1 term; `None` uses 1/sqrt(max(rows, cols)).
    pub sparsity: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl PcpParams {
    /// Standard choice `mu = rows * cols / (4 ||X||_1)`.
    pub fn for_matrix(x: &DMatrix<f64>, tol: f64, max_iter: usize) -> Self {
        let l1: f64 = x.iter().map(|v| v.abs()).sum();
        let mu = if l1 > 0.0 {
            (x.nrows() * x.ncols()) as f64 / (4.0 * l1)
        } else {
            1.0
        };
        Self {
            mu,
            mu_growth: 1.0,
            sparsity: None,
            tol,
            max_iter,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PcpOutput {
    pub low_rank: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn singular_value_threshold(m: DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut svd = m.svd(true, true);
    for s in svd.singular_values.iter_mut() {
        *s = (*s - tau).max(0.0);
    }
    svd.recompose().expect("u and v_t were computed")
}

pub fn pcp_oracle(x: &DMatrix<f64>, params: &PcpParams) -> Result<PcpOutput> {
    if !(params.tol > 0.0) || !(params.mu > 0.0) || params.mu_growth < 1.0 {
        return Err(RpcaError::InvalidArgument(
            "tol and mu must be positive, mu_growth >= 1".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RpcaError::InvalidArgument(
            "matrix has non-finite entries".into(),
        ));
    }
    let (rows, cols) = x.shape();
    let norm_x = x.norm();
    if norm_x == 0.0 {
        return Ok(PcpOutput {
            low_rank: DMatrix::zeros(rows, cols),
            sparse: DMatrix::zeros(rows, cols),
            iterations: 0,
            residual: 0.0,
        });
    }
    let lambda = params
        .sparsity
        .unwrap_or(1.0 / (rows.max(cols) as f64).sqrt());
    let mut mu = params.mu;
    let mut sparse = DMatrix::zeros(rows, cols);
    let mut dual = DMatrix::zeros(rows, cols);
    let mut residual = f64::INFINITY;
    for iter in 1..=params.max_iter {
        let low_rank = singular_value_threshold(x - &sparse + &dual / mu, 1.0 / mu);
        let target = x - &low_rank + &dual / mu;
        sparse = target.map(|v| soft(v, lambda / mu));
        let r = x - &low_rank - &sparse;
        residual = r.norm() / norm_x;
        if residual <= params.tol {
            return Ok(PcpOutput {
                low_rank,
                sparse,
                iterations: iter,
                residual,
            });
        }
        dual += r * mu;
        mu *= params.mu_growth;
    }
    Err(RpcaError::NotConverged {
        iterations: params.max_iter,
        residual,
    })
}
