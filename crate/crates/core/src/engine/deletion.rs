//! Cluster leverage and cluster-deletion quantities.

use nalgebra::{DMatrix, DVector};

use super::{fit_from, FitOptions, GeeFit};
use crate::correlation::CorrStructure;
use crate::data::LongitudinalDataset;
use crate::error::{GeeError, Result};
use crate::family::Family;

fn cluster(fit: &GeeFit, index: usize) -> Result<&super::ClusterFit> {
    fit.clusters.get(index).ok_or(GeeError::IndexOutOfRange {
        index,
        count: fit.clusters.len(),
    })
}

/// Cluster leverage matrix `H_i = D_i M^{-1} D_i' V_i^{-1}`.
pub fn leverage(fit: &GeeFit, index: usize) -> Result<DMatrix<f64>> {
    Ok(cluster(fit, index)?.leverage.clone())
}

/// `(I - H_i)^{-1} e_i`, the cluster residual corrected for its own leverage.
pub fn corrected_residual(fit: &GeeFit, index: usize) -> Result<DVector<f64>> {
    let c = cluster(fit, index)?;
    let n = c.len();
    let singular = || GeeError::DeletionSingular { cluster: c.id.clone() };
    let i_minus_h = DMatrix::identity(n, n) - &c.leverage;
    let lu = i_minus_h.lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(singular());
    }
    let out = lu.solve(&c.resid).ok_or_else(singular)?;
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(singular())
    }
}

/// One-step approximation of `beta_hat - beta_hat_(i)`:
/// `C_i = M^{-1} D_i' V_i^{-1} (I - H_i)^{-1} e_i`.
pub fn one_step_deletion(fit: &GeeFit, index: usize) -> Result<DVector<f64>> {
    let corrected = corrected_residual(fit, index)?;
    let c = &fit.clusters[index];
    Ok(&fit.model_cov * c.d.transpose() * &c.v_inv * corrected)
}

/// Full refit without cluster `index`, warm-started at the full-data estimate.
pub fn exact_deletion(
    dataset: &LongitudinalDataset,
    family: Family,
    structure: CorrStructure,
    options: &FitOptions,
    full: &GeeFit,
    index: usize,
) -> Result<GeeFit> {
    if dataset.n_clusters() < 2 {
        return Err(GeeError::InvalidData("cluster deletion needs at least two clusters".into()));
    }
    let reduced = dataset.without_cluster(index)?;
    fit_from(&reduced, family, structure, options, &full.beta)
}
