//! Marginal-model fitting by Fisher scoring with moment updates of the
//! association and scale parameters.

mod deletion;
mod moments;

use std::collections::HashMap;

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::correlation::{CorrStructure, WorkingCorrelation};
use crate::data::LongitudinalDataset;
use crate::error::{GeeError, Result};
use crate::family::{mean_response_with_offset, quasi_likelihood, Family};
use crate::linalg::{max_abs, spd_inverse, symmetrize};

pub use deletion::{corrected_residual, exact_deletion, leverage, one_step_deletion};
pub use moments::{estimate_alpha, estimate_phi, golden_section, phi_for_mode, AlphaEstimate, PhiMode, ResidualSet};

/// Estimating-equation residual allowed at convergence, relative to `1 + |beta|`.
pub const EE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence tolerance on `max |delta beta|`.
    pub tol: f64,
    pub phi_mode: PhiMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 200,
            tol: 1e-8,
            phi_mode: PhiMode::Estimate,
        }
    }
}

impl FitOptions {
    pub fn with_phi(mut self, phi_mode: PhiMode) -> Self {
        self.phi_mode = phi_mode;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_iter == 0 {
            return Err(GeeError::Config(format!(
                "need tol > 0 and max_iter >= 1 (got tol = {}, max_iter = {})",
                self.tol, self.max_iter
            )));
        }
        Ok(())
    }
}

/// Per-cluster quantities at the final estimates.
#[derive(Debug, Clone)]
pub struct ClusterFit {
    pub id: String,
    pub waves: Vec<f64>,
    pub y: DVector<f64>,
    pub mu: DVector<f64>,
    /// Raw residual `y - mu`.
    pub resid: DVector<f64>,
    pub pearson: DVector<f64>,
    /// Diagonal of `A` (variance function).
    pub variance: DVector<f64>,
    /// Diagonal of `L` (link derivative).
    pub link_derivative: DVector<f64>,
    pub d: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub v_inv: DMatrix<f64>,
    /// Cluster leverage `H = D M^{-1} D' V^{-1}`.
    pub leverage: DMatrix<f64>,
    /// Score contribution `D' V^{-1} e`.
    pub score: DVector<f64>,
}

impl ClusterFit {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// A fitted marginal model.
#[derive(Debug, Clone)]
pub struct GeeFit {
    pub family: Family,
    pub structure: CorrStructure,
    pub beta: DVector<f64>,
    pub correlation: WorkingCorrelation,
    pub phi: f64,
    /// `M = sum D' V^{-1} D`.
    pub information: DMatrix<f64>,
    /// Model-based covariance `M^{-1}`.
    pub model_cov: DMatrix<f64>,
    /// Empirical covariance `M^{-1} J M^{-1}`.
    pub sandwich_cov: DMatrix<f64>,
    pub clusters: Vec<ClusterFit>,
    pub iterations: usize,
    pub converged: bool,
    /// `max |delta beta|` of the last scoring step.
    pub last_step: f64,
    /// Norm of the estimating equations at the final estimates.
    pub ee_norm: f64,
    /// Quasi-likelihood at the final estimates.
    pub ql: f64,
    /// Number of positive-definite repairs of an unstructured estimate.
    pub repairs: usize,
    pub total_obs: usize,
}

impl GeeFit {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Empirical standard errors.
    pub fn robust_se(&self) -> DVector<f64> {
        self.sandwich_cov.diagonal().map(f64::sqrt)
    }

    /// Model-based standard errors.
    pub fn model_se(&self) -> DVector<f64> {
        self.model_cov.diagonal().map(f64::sqrt)
    }
}

/// Fit a marginal model with the given working structure.
///
/// Starts from an independence fit begun at `beta = 0`; each iteration takes a
/// scoring step for `beta`, then recomputes residuals, `phi` and `alpha`.
/// Non-convergence is reported through `converged = false` rather than an error.
pub fn fit(
    dataset: &LongitudinalDataset,
    family: Family,
    structure: CorrStructure,
    options: &FitOptions,
) -> Result<GeeFit> {
    Fitter::new(dataset, family, options, None)?.run(structure, None)
}

/// As [`fit`], with a fixed per-observation offset added to the linear
/// predictor of every cluster.
pub fn fit_with_offset(
    dataset: &LongitudinalDataset,
    family: Family,
    structure: CorrStructure,
    options: &FitOptions,
    offsets: &[DVector<f64>],
) -> Result<GeeFit> {
    if offsets.len() != dataset.n_clusters()
        || offsets.iter().zip(dataset.clusters()).any(|(o, c)| o.len() != c.len())
    {
        return Err(GeeError::InvalidData("offsets do not match cluster sizes".into()));
    }
    Fitter::new(dataset, family, options, Some(offsets))?.run(structure, None)
}

/// Fit starting directly at `start`, skipping the independence stage.
pub fn fit_from(
    dataset: &LongitudinalDataset,
    family: Family,
    structure: CorrStructure,
    options: &FitOptions,
    start: &DVector<f64>,
) -> Result<GeeFit> {
    Fitter::new(dataset, family, options, None)?.run(structure, Some(start))
}

struct Fitter<'a> {
    data: &'a LongitudinalDataset,
    family: Family,
    options: &'a FitOptions,
    offsets: Option<&'a [DVector<f64>]>,
}

struct Accumulated {
    information: DMatrix<f64>,
    score: DVector<f64>,
}

impl<'a> Fitter<'a> {
    fn new(
        data: &'a LongitudinalDataset,
        family: Family,
        options: &'a FitOptions,
        offsets: Option<&'a [DVector<f64>]>,
    ) -> Result<Self> {
        options.validate()?;
        for c in data.clusters() {
            if let Some(bad) = c.y.iter().find(|&&y| !family.validate_response(y)) {
                return Err(GeeError::InvalidData(format!(
                    "cluster {}: response {bad} invalid for {family} family",
                    c.id
                )));
            }
        }
        Ok(Fitter {
            data,
            family,
            options,
            offsets,
        })
    }

    fn offset(&self, i: usize) -> Option<&DVector<f64>> {
        self.offsets.map(|o| &o[i])
    }

    /// Inverse working correlation per distinct wave pattern.
    fn inverse_correlations(&self, corr: &WorkingCorrelation) -> Result<HashMap<Vec<u64>, DMatrix<f64>>> {
        let mut cache = HashMap::new();
        for c in self.data.clusters() {
            let key: Vec<u64> = c.waves.iter().map(|w| w.to_bits()).collect();
            if cache.contains_key(&key) {
                continue;
            }
            let r = corr.matrix(&c.waves).map_err(|e| e.for_cluster(&c.id))?;
            let r_inv = spd_inverse(&r).ok_or_else(|| GeeError::NotPositiveDefinite { cluster: c.id.clone() })?;
            cache.insert(key, r_inv);
        }
        Ok(cache)
    }

    fn accumulate(&self, beta: &DVector<f64>, corr: &WorkingCorrelation, phi: f64) -> Result<Accumulated> {
        let p = self.data.p();
        let r_inv = self.inverse_correlations(corr)?;
        let mut information = DMatrix::zeros(p, p);
        let mut score = DVector::zeros(p);
        for (i, c) in self.data.clusters().iter().enumerate() {
            let m = mean_response_with_offset(self.family, &c.x, beta, self.offset(i));
            let key: Vec<u64> = c.waves.iter().map(|w| w.to_bits()).collect();
            let v_inv = working_inverse(&r_inv[&key], &m.variance, phi);
            let dt_vinv = m.d.transpose() * &v_inv;
            information += &dt_vinv * &m.d;
            score += &dt_vinv * (&c.y - &m.mu);
        }
        Ok(Accumulated { information, score })
    }

    fn pearson_residuals(&self, beta: &DVector<f64>) -> Vec<DVector<f64>> {
        self.data
            .clusters()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let m = mean_response_with_offset(self.family, &c.x, beta, self.offset(i));
                DVector::from_fn(c.len(), |t, _| (c.y[t] - m.mu[t]) / m.variance[t].sqrt())
            })
            .collect()
    }

    fn moments(&self, structure: CorrStructure, beta: &DVector<f64>) -> Result<(f64, AlphaEstimate)> {
        let pearson = self.pearson_residuals(beta);
        let p = self.data.p();
        let phi = phi_for_mode(self.options.phi_mode, &pearson, self.data.total_obs(), p);
        let sets: Vec<ResidualSet<'_>> = pearson
            .iter()
            .zip(self.data.clusters())
            .map(|(r, c)| ResidualSet {
                residuals: r,
                waves: &c.waves,
            })
            .collect();
        let alpha = estimate_alpha(structure, &sets, phi, p, self.data.wave_grid())?;
        Ok((phi, alpha))
    }

    fn ee_threshold(beta: &DVector<f64>) -> f64 {
        EE_TOLERANCE * (1.0 + beta.norm())
    }

    /// Scoring iterations with a fixed independence working structure and phi = 1.
    fn independence_stage(&self, mut beta: DVector<f64>) -> Result<DVector<f64>> {
        let corr = WorkingCorrelation::Independence;
        for iteration in 0..self.options.max_iter {
            let acc = self.accumulate(&beta, &corr, 1.0)?;
            let step = solve_spd(&acc.information, &acc.score).ok_or(GeeError::RankDeficient { iteration })?;
            beta += &step;
            if max_abs(&step) <= self.options.tol {
                break;
            }
        }
        Ok(beta)
    }

    fn run(&self, structure: CorrStructure, start: Option<&DVector<f64>>) -> Result<GeeFit> {
        let p = self.data.p();
        let mut beta = match start {
            Some(s) if s.len() == p => s.clone(),
            Some(s) => {
                return Err(GeeError::InvalidData(format!(
                    "start vector has length {}, expected {p}",
                    s.len()
                )))
            }
            None => self.independence_stage(DVector::zeros(p))?,
        };
        let (mut phi, est) = self.moments(structure, &beta)?;
        let mut corr = est.correlation;
        let mut repairs = usize::from(est.repaired);

        let mut last_step = f64::INFINITY;
        let mut iterations = 0;
        let mut converged = false;
        loop {
            let acc = self.accumulate(&beta, &corr, phi)?;
            if last_step <= self.options.tol && acc.score.norm() <= Self::ee_threshold(&beta) {
                converged = true;
                break;
            }
            if iterations == self.options.max_iter {
                break;
            }
            let step = solve_spd(&acc.information, &acc.score)
                .ok_or(GeeError::RankDeficient { iteration: iterations })?;
            beta += &step;
            last_step = max_abs(&step);
            iterations += 1;
            if !beta.iter().all(|b| b.is_finite()) {
                break;
            }
            let (new_phi, est) = self.moments(structure, &beta)?;
            phi = new_phi;
            corr = est.correlation;
            repairs += usize::from(est.repaired);
        }
        if !converged {
            debug!("{structure} fit stopped after {iterations} iterations, last step {last_step:e}");
        }
        self.finalize(structure, beta, corr, phi, iterations, converged, last_step, repairs)
    }

    #[allow(clippy::too_many_arguments)]
    fn finalize(
        &self,
        structure: CorrStructure,
        beta: DVector<f64>,
        correlation: WorkingCorrelation,
        phi: f64,
        iterations: usize,
        converged: bool,
        last_step: f64,
        repairs: usize,
    ) -> Result<GeeFit> {
        let p = self.data.p();
        let mut information = DMatrix::zeros(p, p);
        let mut partial = Vec::with_capacity(self.data.n_clusters());
        let mut ql = 0.0;
        for (i, c) in self.data.clusters().iter().enumerate() {
            let m = mean_response_with_offset(self.family, &c.x, &beta, self.offset(i));
            let r = correlation.matrix(&c.waves).map_err(|e| e.for_cluster(&c.id))?;
            let r_inv = spd_inverse(&r).ok_or_else(|| GeeError::NotPositiveDefinite { cluster: c.id.clone() })?;
            let v = working_covariance(&r, &m.variance, phi);
            let v_inv = working_inverse(&r_inv, &m.variance, phi);
            let resid = &c.y - &m.mu;
            let pearson = DVector::from_fn(c.len(), |t, _| resid[t] / m.variance[t].sqrt());
            let dt_vinv = m.d.transpose() * &v_inv;
            information += &dt_vinv * &m.d;
            let score = &dt_vinv * &resid;
            ql += quasi_likelihood(self.family, &c.y, &m.mu, phi);
            partial.push(ClusterFit {
                id: c.id.clone(),
                waves: c.waves.clone(),
                y: c.y.clone(),
                mu: m.mu,
                resid,
                pearson,
                variance: m.variance,
                link_derivative: m.link_derivative,
                d: m.d,
                v,
                v_inv,
                leverage: DMatrix::zeros(0, 0),
                score,
            });
        }
        let information = symmetrize(&information);
        let model_cov = spd_inverse(&information).ok_or(GeeError::RankDeficient { iteration: iterations })?;
        let mut meat = DMatrix::zeros(p, p);
        let mut total_score = DVector::zeros(p);
        for cf in &mut partial {
            meat += &cf.score * cf.score.transpose();
            total_score += &cf.score;
            cf.leverage = cluster_leverage(&cf.d, &model_cov, &cf.v_inv);
        }
        let sandwich_cov = symmetrize(&(&model_cov * meat * &model_cov));
        Ok(GeeFit {
            family: self.family,
            structure,
            beta,
            correlation,
            phi,
            information,
            model_cov,
            sandwich_cov,
            clusters: partial,
            iterations,
            converged,
            last_step,
            ee_norm: total_score.norm(),
            ql,
            repairs,
            total_obs: self.data.total_obs(),
        })
    }
}

/// `V = phi A^{1/2} R A^{1/2}`.
pub fn working_covariance(r: &DMatrix<f64>, variance: &DVector<f64>, phi: f64) -> DMatrix<f64> {
    let sd = variance.map(f64::sqrt);
    DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| phi * sd[i] * r[(i, j)] * sd[j])
}

fn working_inverse(r_inv: &DMatrix<f64>, variance: &DVector<f64>, phi: f64) -> DMatrix<f64> {
    let isd = variance.map(|v| 1.0 / v.sqrt());
    DMatrix::from_fn(r_inv.nrows(), r_inv.ncols(), |i, j| isd[i] * r_inv[(i, j)] * isd[j] / phi)
}

fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = symmetrize(m).cholesky()?;
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// `H = D M^{-1} D' V^{-1}`.
pub(crate) fn cluster_leverage(d: &DMatrix<f64>, m_inv: &DMatrix<f64>, v_inv: &DMatrix<f64>) -> DMatrix<f64> {
    d * m_inv * d.transpose() * v_inv
}

/// Sandwich covariance recomputed from the cached cluster quantities.
pub fn sandwich(fit: &GeeFit) -> Result<DMatrix<f64>> {
    sandwich_with_middle(fit, |c| &c.resid * c.resid.transpose())
}

/// `M^{-1} (sum D'V^{-1} S_i V^{-1} D) M^{-1}` for an arbitrary middle term `S_i`
/// standing in for `e_i e_i'`.
pub fn sandwich_with_middle(fit: &GeeFit, middle: impl Fn(&ClusterFit) -> DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = fit.p();
    let mut information = DMatrix::zeros(p, p);
    let mut meat = DMatrix::zeros(p, p);
    for c in &fit.clusters {
        let dt_vinv = c.d.transpose() * &c.v_inv;
        information += &dt_vinv * &c.d;
        meat += &dt_vinv * middle(c) * dt_vinv.transpose();
    }
    let m_inv = spd_inverse(&symmetrize(&information)).ok_or(GeeError::Singular("M"))?;
    Ok(symmetrize(&(&m_inv * meat * &m_inv)))
}

#[cfg(test)]
pub(crate) mod tests;
