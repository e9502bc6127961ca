//! Joint SVD over stacked task gradients, top-k energy accounting,
//! spectrum concentration and ridge-regularized CCA between tasks.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densela::{self, covariance, inverse_sqrt_psd, LinalgError, SvdResult};
use crate::gradbundle::{BundleError, GradientBundle};
use crate::grouping::{GroupingError, GroupingPlan};

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_LAMBDA: f64 = 1e-3;
/// Relative eigenvalue floor below which an unregularized covariance is
/// treated as singular.
pub const SINGULAR_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SubspaceError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error("subspace: k = {k} outside 1..={bound}")]
    InvalidK { k: usize, bound: usize },
    #[error("subspace: all task energies are zero")]
    ZeroEnergy,
    #[error("subspace: all singular values are zero")]
    ZeroSpectrum,
    #[error("subspace: cca: {0}")]
    Cca(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceConfig {
    pub top_k: usize,
    pub lambda: f64,
    /// Column-mean centering for CCA covariances.
    pub center: bool,
    /// Scale every gradient row to unit norm before stacking.
    pub normalize_rows: bool,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            lambda: DEFAULT_LAMBDA,
            center: true,
            normalize_rows: false,
        }
    }
}

/// SVD of the row-wise stack `[G_1; …; G_n]`.
#[derive(Debug, Clone)]
pub struct JointSvd {
    pub tasks: Vec<String>,
    pub row_counts: Vec<usize>,
    pub svd: SvdResult,
}

fn task_matrices(
    bundle: &GradientBundle,
    layer: &str,
    normalize_rows: bool,
) -> Result<Vec<DMatrix<f64>>, SubspaceError> {
    bundle
        .tasks()
        .iter()
        .map(|t| {
            let mut m = bundle.sample_gradients(t, layer)?.to_dmatrix();
            if normalize_rows {
                for mut r in m.row_iter_mut() {
                    let n = r.norm();
                    if n >= densela::ZERO_NORM {
                        r /= n;
                    }
                }
            }
            Ok(m)
        })
        .collect()
}

fn stack(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = mats[0].ncols();
    let rows: usize = mats.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for m in mats {
        out.rows_mut(at, m.nrows()).copy_from(m);
        at += m.nrows();
    }
    out
}

pub fn joint_svd(bundle: &GradientBundle, layer: &str, normalize_rows: bool) -> Result<JointSvd, SubspaceError> {
    let mats = task_matrices(bundle, layer, normalize_rows)?;
    Ok(JointSvd {
        tasks: bundle.tasks().to_vec(),
        row_counts: mats.iter().map(|m| m.nrows()).collect(),
        svd: densela::svd(&stack(&mats))?,
    })
}

/// `E_i = Σ_{j≤k} ‖G_i v_j‖²` and `p_i = E_i / Σ_l E_l`.
pub fn energies_from(mats: &[DMatrix<f64>], v: &DMatrix<f64>, k: usize) -> Result<(Vec<f64>, Vec<f64>), SubspaceError> {
    let bound = v.ncols();
    if k == 0 || k > bound {
        return Err(SubspaceError::InvalidK { k, bound });
    }
    let vk = v.columns(0, k);
    let energies: Vec<f64> = mats
        .iter()
        .map(|g| (g * vk).iter().map(|x| x * x).sum())
        .collect();
    let total: f64 = energies.iter().sum();
    if total <= 0.0 {
        return Err(SubspaceError::ZeroEnergy);
    }
    let props = energies.iter().map(|e| e / total).collect();
    Ok((energies, props))
}

pub fn energy_proportions(
    bundle: &GradientBundle,
    layer: &str,
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>), SubspaceError> {
    let mats = task_matrices(bundle, layer, false)?;
    let svd = densela::svd(&stack(&mats))?;
    energies_from(&mats, &svd.v, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    /// `σ₁² / Σ_j σ_j²` over the whole spectrum.
    pub top1_share: f64,
    /// Gini over the leading `k` squared singular values.
    pub gini: f64,
}

pub fn spectrum_stats(sigma: &[f64], k: usize) -> Result<SpectrumStats, SubspaceError> {
    let energy: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    if sigma.is_empty() || total <= 0.0 {
        return Err(SubspaceError::ZeroSpectrum);
    }
    let k = k.clamp(1, energy.len());
    Ok(SpectrumStats {
        top1_share: energy[0] / total,
        gini: densela::gini(&energy[..k])?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaResult {
    pub rho: f64,
    pub w_a: Vec<f64>,
    pub w_b: Vec<f64>,
    pub lambda: f64,
}

/// Leading ridge-regularized canonical correlation with centered
/// covariances.
pub fn ridge_cca(a: &DMatrix<f64>, b: &DMatrix<f64>, lambda: f64) -> Result<CcaResult, SubspaceError> {
    ridge_cca_with(a, b, lambda, true)
}

/// Maximizes `w_aᵀ Γ_ab w_b / sqrt((w_aᵀ(Γ_aa+λI)w_a)(w_bᵀ(Γ_bb+λI)w_b))` by
/// whitening both sides with `(Γ+λI)^{-1/2}` and taking the top singular
/// pair of the whitened cross-covariance.
pub fn ridge_cca_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lambda: f64,
    center: bool,
) -> Result<CcaResult, SubspaceError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SubspaceError::Cca(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if a.nrows() != b.nrows() {
        return Err(SubspaceError::Cca(format!(
            "row counts differ: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let caa = covariance(a, a, center)?;
    let cbb = covariance(b, b, center)?;
    let cab = covariance(a, b, center)?;
    let whiten = |c: &DMatrix<f64>, side: &str| {
        inverse_sqrt_psd(c, lambda, SINGULAR_REL_TOL).map_err(|e| {
            if lambda == 0.0 {
                SubspaceError::Cca(format!(
                    "{side} covariance is singular at lambda = 0 ({e}); use a positive lambda"
                ))
            } else {
                SubspaceError::Linalg(e)
            }
        })
    };
    let ka = whiten(&caa, "first")?;
    let kb = whiten(&cbb, "second")?;
    let t = &ka * cab * &kb;
    let s = densela::svd(&t)?;
    let w_a = &ka * s.u.column(0);
    let w_b = &kb * s.v.column(0);
    Ok(CcaResult {
        rho: s.sigma[0].clamp(0.0, 1.0),
        w_a: w_a.iter().copied().collect(),
        w_b: w_b.iter().copied().collect(),
        lambda,
    })
}

/// Sums task proportions within each group of `grouping`.
pub fn group_energy(p: &[f64], tasks: &[String], grouping: &GroupingPlan) -> Result<Vec<f64>, SubspaceError> {
    if p.len() != tasks.len() {
        return Err(SubspaceError::Grouping(GroupingError::Invalid(format!(
            "{} proportions for {} tasks",
            p.len(),
            tasks.len()
        ))));
    }
    grouping.validate(tasks)?;
    Ok(grouping
        .groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|t| p[tasks.iter().position(|x| x == t).unwrap()])
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceReport {
    pub layer: String,
    pub tasks: Vec<String>,
    pub k: usize,
    pub sigma: Vec<f64>,
    /// `d × k`, leading right singular vectors.
    #[serde(with = "crate::serde_mat")]
    pub v_k: DMatrix<f64>,
    pub energies: Vec<f64>,
    pub proportions: Vec<f64>,
    pub top1_share: f64,
    pub gini: f64,
    /// Leading canonical correlations between tasks, computed on the
    /// projections `G_i V_k`.
    #[serde(with = "crate::serde_mat")]
    pub cca: DMatrix<f64>,
    pub lambda: f64,
    pub centered: bool,
    pub normalize_rows: bool,
    pub warnings: Vec<String>,
}

impl SubspaceReport {
    /// Mean of the off-diagonal canonical correlations.
    pub fn mean_offdiag_rho(&self) -> f64 {
        let n = self.cca.nrows();
        if n < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += self.cca[(i, j)];
                }
            }
        }
        s / (n * (n - 1)) as f64
    }

    /// `index,sigma,energy_share` rows, 1-based index.
    pub fn spectrum_csv(&self) -> String {
        let total: f64 = self.sigma.iter().map(|s| s * s).sum();
        let mut out = String::from("index,sigma,energy_share\n");
        for (i, s) in self.sigma.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, s, s * s / total));
        }
        out
    }
}

pub fn subspace_report(
    bundle: &GradientBundle,
    layer: &str,
    cfg: &SubspaceConfig,
) -> Result<SubspaceReport, SubspaceError> {
    let mats = task_matrices(bundle, layer, cfg.normalize_rows)?;
    let svd = densela::svd(&stack(&mats))?;
    let mut warnings = Vec::new();
    let bound = svd.rank_bound();
    let k = if cfg.top_k > bound {
        warnings.push(format!("top_k {} exceeds rank bound {bound}; using {bound}", cfg.top_k));
        bound
    } else {
        cfg.top_k
    };
    let (energies, proportions) = energies_from(&mats, &svd.v, k)?;
    let stats = spectrum_stats(&svd.sigma, k)?;
    let v_k = svd.v.columns(0, k).into_owned();

    let proj: Vec<DMatrix<f64>> = mats.iter().map(|g| g * &v_k).collect();
    let n = mats.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .collect();
    let rhos: Vec<Result<(f64, Option<String>), SubspaceError>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if i == j && cfg.lambda == 0.0 {
                return Ok((1.0, None));
            }
            let m = proj[i].nrows().min(proj[j].nrows());
            let note = (proj[i].nrows() != proj[j].nrows()).then(|| {
                format!(
                    "cca {}/{}: sample counts differ ({} vs {}); rows paired by index and truncated to {m}",
                    bundle.tasks()[i],
                    bundle.tasks()[j],
                    proj[i].nrows(),
                    proj[j].nrows()
                )
            });
            let a = proj[i].rows(0, m).into_owned();
            let b = proj[j].rows(0, m).into_owned();
            Ok((ridge_cca_with(&a, &b, cfg.lambda, cfg.center)?.rho, note))
        })
        .collect();
    let mut cca = DMatrix::zeros(n, n);
    for (&(i, j), r) in pairs.iter().zip(rhos) {
        let (rho, note) = r?;
        cca[(i, j)] = rho;
        cca[(j, i)] = rho;
        warnings.extend(note);
    }

    Ok(SubspaceReport {
        layer: layer.into(),
        tasks: bundle.tasks().to_vec(),
        k,
        sigma: svd.sigma,
        v_k,
        energies,
        proportions,
        top1_share: stats.top1_share,
        gini: stats.gini,
        cca,
        lambda: cfg.lambda,
        centered: cfg.center,
        normalize_rows: cfg.normalize_rows,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradbundle::{GradientMatrix, LayerDecl};
    use crate::grouping::GroupingMethod;

    fn bundle(tasks: &[(&str, usize, Vec<f32>)], d: usize) -> GradientBundle {
        let mats = tasks
            .iter()
            .map(|(t, m, data)| GradientMatrix::new(*t, "l", *m, d, data.clone()).unwrap())
            .collect();
        GradientBundle::new(
            tasks.iter().map(|(t, _, _)| t.to_string()).collect(),
            vec![LayerDecl { name: "l".into(), cols: d }],
            mats,
        )
        .unwrap()
    }

    #[test]
    fn joint_svd_simple() {
        let b = bundle(&[("a", 2, vec![1.0, 0.0, 0.0, 0.0])], 2);
        let j = joint_svd(&b, "l", false).unwrap();
        assert_eq!(j.svd.sigma, vec![1.0, 0.0]);
    }

    #[test]
    fn energy_hand_example() {
        let b = bundle(&[("a", 1, vec![2.0, 0.0]), ("b", 1, vec![1.0, 0.0])], 2);
        let (e, p) = energy_proportions(&b, "l", 1).unwrap();
        assert!((e[0] - 4.0).abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.8).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
        assert!(matches!(energy_proportions(&b, "l", 3), Err(SubspaceError::InvalidK { .. })));
        assert!(matches!(energy_proportions(&b, "l", 0), Err(SubspaceError::InvalidK { .. })));
    }

    #[test]
    fn identical_tasks_split_evenly() {
        let data = vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let b = bundle(&[("a", 2, data.clone()), ("b", 2, data.clone()), ("c", 2, data)], 3);
        let (_, p) = energy_proportions(&b, "l", 2).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn spectrum_stats_examples() {
        let s = spectrum_stats(&[1.0, 1.0, 1.0, 1.0], 4).unwrap();
        assert_eq!((s.top1_share, s.gini), (0.25, 0.0));
        let s = spectrum_stats(&[3.0, 1.0, 1.0, 1.0], 4).unwrap();
        assert_eq!(s.top1_share, 0.75);
        assert_eq!(spectrum_stats(&[5.0, 0.0, 0.0], 3).unwrap().top1_share, 1.0);
        assert!(spectrum_stats(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn cca_independent_supports() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 2.0, 0.0, -2.0, 0.0]);
        let b = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0]);
        let r = ridge_cca(&a, &b, 0.1).unwrap();
        assert!(r.rho.abs() < 1e-12);
    }

    #[test]
    fn cca_singular_needs_lambda() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let err = ridge_cca(&a, &a, 0.0).unwrap_err();
        assert!(err.to_string().contains("positive lambda"), "{err}");
        assert!(ridge_cca(&a, &a, 1e-3).is_ok());
        assert!(ridge_cca(&a, &a.rows(0, 2).into_owned(), 1e-3).is_err());
    }

    #[test]
    fn group_energy_examples() {
        let tasks: Vec<String> = ["1", "2", "3", "4"].iter().map(|s| s.to_string()).collect();
        let g = GroupingPlan {
            method: GroupingMethod::Kmeans,
            k: 2,
            groups: vec![vec!["1".into()], vec!["2".into(), "3".into(), "4".into()]],
        };
        let pg = group_energy(&[0.1, 0.2, 0.3, 0.4], &tasks, &g).unwrap();
        assert!((pg[0] - 0.1).abs() < 1e-15 && (pg[1] - 0.9).abs() < 1e-15);
        let single = GroupingPlan::single_group(&tasks, GroupingMethod::Consensus);
        assert_eq!(group_energy(&[0.1, 0.2, 0.3, 0.4], &tasks, &single).unwrap(), vec![1.0]);
        let uniform = group_energy(&[0.25; 4], &tasks, &g).unwrap();
        assert_eq!(uniform, vec![0.25, 0.75]);
        assert!(group_energy(&[0.5, 0.5], &tasks, &g).is_err());
    }
}
