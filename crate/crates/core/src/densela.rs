//! Dense linear-algebra kernels shared by the analysis modules: cosine
//! similarity, thin SVD, (cross-)covariance and the Gini concentration
//! statistic.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

/// Norms below this are treated as zero by [`cosine`].
pub const ZERO_NORM: f64 = 1e-300;

const SVD_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("linalg: svd failed to converge within {max_iter} iterations on a {rows}x{cols} matrix")]
    SvdNoConvergence {
        rows: usize,
        cols: usize,
        max_iter: usize,
    },
    #[error("linalg: non-finite input")]
    NonFinite,
    #[error("linalg: empty matrix")]
    Empty,
    #[error("linalg: shape mismatch: {0}")]
    Shape(String),
    #[error("linalg: {0}")]
    Domain(String),
}

/// Cosine similarity with the zero-norm convention made explicit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input norm fell below [`ZERO_NORM`]; `value` is 0.
    pub degenerate: bool,
}

/// `u·v / (‖u‖‖v‖)` clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Cosine {
    debug_assert_eq!(u.len(), v.len());
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot / (nu * nv)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Thin SVD `M = U diag(sigma) Vᵀ` with `sigma` non-increasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m × p`, orthonormal columns, `p = min(m, n)`.
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    /// `n × p`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SvdResult {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    /// Rank-`r` reconstruction `U_r Σ_r V_rᵀ`.
    pub fn truncated(&self, r: usize) -> DMatrix<f64> {
        let r = r.min(self.sigma.len());
        let mut us = self.u.columns(0, r).into_owned();
        for (j, s) in self.sigma.iter().take(r).enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.columns(0, r).transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.truncated(self.sigma.len())
    }

    /// `sqrt(Σ_{j>r} σ_j²)`, the Eckart–Young residual norm.
    pub fn tail_norm(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
    }
}

pub fn svd(m: &DMatrix<f64>) -> Result<SvdResult, LinalgError> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(LinalgError::Empty);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let raw = nalgebra::linalg::SVD::try_new(m.clone(), true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or(LinalgError::SvdNoConvergence {
            rows: m.nrows(),
            cols: m.ncols(),
            max_iter: SVD_MAX_ITER,
        })?;
    let u = raw.u.expect("u requested");
    let v_t = raw.v_t.expect("v_t requested");
    let p = raw.singular_values.len();

    // Stable sort by descending singular value; ties keep original order.
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        raw.singular_values[b]
            .partial_cmp(&raw.singular_values[a])
            .unwrap()
    });
    let sigma = order.iter().map(|&i| raw.singular_values[i].max(0.0)).collect();
    let u = DMatrix::from_fn(m.nrows(), p, |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(m.ncols(), p, |r, c| v_t[(order[c], r)]);
    Ok(SvdResult { u, sigma, v })
}

/// `(1/m) ÃᵀB̃`, with column-mean centering when `center` is set.
pub fn covariance(a: &DMatrix<f64>, b: &DMatrix<f64>, center: bool) -> Result<DMatrix<f64>, LinalgError> {
    if a.nrows() != b.nrows() {
        return Err(LinalgError::Shape(format!(
            "row counts differ: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let m = a.nrows();
    let min_rows = if center { 2 } else { 1 };
    if m < min_rows {
        return Err(LinalgError::Domain(format!(
            "covariance needs at least {min_rows} rows, got {m}"
        )));
    }
    let (ac, bc) = if center {
        (center_columns(a), center_columns(b))
    } else {
        (a.clone(), b.clone())
    };
    Ok(ac.transpose() * bc / m as f64)
}

pub fn center_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Gini coefficient `Σ_i Σ_j |x_i − x_j| / (2k²·mean)`.
pub fn gini(values: &[f64]) -> Result<f64, LinalgError> {
    if values.is_empty() {
        return Err(LinalgError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    if values.iter().any(|&v| v < 0.0) {
        return Err(LinalgError::Domain("gini requires non-negative values".into()));
    }
    let sum: f64 = values.iter().sum();
    if sum <= 0.0 {
        return Err(LinalgError::Domain("gini of an all-zero vector".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = sorted.len() as f64;
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − k + 1) x_(i) over ascending order.
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - k + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    let mean = sum / k;
    Ok((pair_sum / (2.0 * k * k * mean)).max(0.0))
}

/// `(S + λI)^{-1/2}` for symmetric positive semi-definite `S`. Fails when
/// the regularized spectrum has a non-positive eigenvalue relative to
/// `rel_tol · max eigenvalue`.
pub fn inverse_sqrt_psd(s: &DMatrix<f64>, lambda: f64, rel_tol: f64) -> Result<DMatrix<f64>, LinalgError> {
    let n = s.nrows();
    if n != s.ncols() {
        return Err(LinalgError::Shape("inverse square root of non-square matrix".into()));
    }
    let sym = (s + s.transpose()) * 0.5 + DMatrix::identity(n, n) * lambda;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = rel_tol * max.max(f64::MIN_POSITIVE);
    if let Some(min) = eig.eigenvalues.iter().cloned().reduce(f64::min) {
        if min <= floor {
            return Err(LinalgError::Domain(format!(
                "matrix is numerically singular (min eigenvalue {min:.3e}, max {max:.3e})"
            )));
        }
    }
    let d = eig.eigenvalues.map(|e| 1.0 / e.sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&d) * q.transpose())
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}
