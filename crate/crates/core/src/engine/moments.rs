//! Method-of-moments estimators for the scale and association parameters,
//! computed from Pearson residuals.

use nalgebra::{DMatrix, DVector};

use crate::correlation::{CorrStructure, WorkingCorrelation, MAX_CORR};
use crate::data::WaveGrid;
use crate::error::{GeeError, Result};

/// Pearson residuals of one cluster with the waves they were observed at.
#[derive(Debug, Clone, Copy)]
pub struct ResidualSet<'a> {
    pub residuals: &'a DVector<f64>,
    pub waves: &'a [f64],
}

/// How the dispersion is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhiMode {
    /// phi held at one.
    FixedOne,
    /// phi estimated from Pearson residuals.
    #[default]
    Estimate,
}

/// `sum r^2 / (total_obs - p)`.
pub fn estimate_phi<'a>(residuals: impl IntoIterator<Item = &'a DVector<f64>>, total_obs: usize, p: usize) -> f64 {
    assert!(total_obs > p, "total observations must exceed p");
    let ss: f64 = residuals.into_iter().map(|r| r.norm_squared()).sum();
    ss / (total_obs - p) as f64
}

pub fn phi_for_mode<'a>(
    mode: PhiMode,
    residuals: impl IntoIterator<Item = &'a DVector<f64>>,
    total_obs: usize,
    p: usize,
) -> f64 {
    match mode {
        PhiMode::FixedOne => 1.0,
        PhiMode::Estimate => estimate_phi(residuals, total_obs, p).max(f64::MIN_POSITIVE),
    }
}

/// Result of an association estimate: the new working correlation and
/// whether an unstructured estimate needed a positive-definite repair.
#[derive(Debug, Clone)]
pub struct AlphaEstimate {
    pub correlation: WorkingCorrelation,
    pub repaired: bool,
}

/// Moment estimate of the association parameters for `kind`.
///
/// Denominators subtract `p`. Clusters with a single observation contribute
/// no pairs. AR1 uses the lag-one moment estimator when the wave grid is a
/// run of consecutive integers and otherwise a least-squares fit of
/// `alpha^gap` to adjacent-pair products over `[0, 0.99]`.
pub fn estimate_alpha(
    kind: CorrStructure,
    sets: &[ResidualSet<'_>],
    phi: f64,
    p: usize,
    grid: &WaveGrid,
) -> Result<AlphaEstimate> {
    let correlation = match kind {
        CorrStructure::Independence => WorkingCorrelation::Independence,
        CorrStructure::Exchangeable => WorkingCorrelation::Exchangeable {
            alpha: exchangeable(sets, phi, p)?,
        },
        CorrStructure::Ar1 => WorkingCorrelation::Ar1 {
            alpha: if unit_spaced(grid) {
                ar1_lag_one(sets, phi, p)?
            } else {
                ar1_least_squares(sets, phi, p)?
            },
        },
        CorrStructure::Unstructured => {
            let est = unstructured(sets, phi, p, grid)?;
            let (correlation, repaired) = WorkingCorrelation::unstructured(grid.clone(), &est)?;
            return Ok(AlphaEstimate { correlation, repaired });
        }
    };
    Ok(AlphaEstimate {
        correlation,
        repaired: false,
    })
}

fn unit_spaced(grid: &WaveGrid) -> bool {
    let t = grid.times();
    t.iter().all(|v| v.fract() == 0.0) && t.windows(2).all(|w| w[1] - w[0] == 1.0)
}

fn exchangeable(sets: &[ResidualSet<'_>], phi: f64, p: usize) -> Result<f64> {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for s in sets {
        let r = s.residuals;
        let n = r.len();
        for j in 0..n {
            for k in (j + 1)..n {
                num += r[j] * r[k];
            }
        }
        pairs += n * (n.saturating_sub(1)) / 2;
    }
    if pairs <= p {
        return Err(GeeError::StructureInfeasible {
            structure: "Exch",
            detail: format!("{pairs} within-cluster pairs do not exceed p = {p}"),
        });
    }
    Ok((num / (phi * (pairs - p) as f64)).clamp(-MAX_CORR, MAX_CORR))
}

fn ar1_lag_one(sets: &[ResidualSet<'_>], phi: f64, p: usize) -> Result<f64> {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for s in sets {
        let n = s.residuals.len();
        for j in 0..n {
            for k in (j + 1)..n {
                if s.waves[k] - s.waves[j] == 1.0 {
                    num += s.residuals[j] * s.residuals[k];
                    pairs += 1;
                }
            }
        }
    }
    if pairs <= p {
        return Err(GeeError::StructureInfeasible {
            structure: "AR1",
            detail: format!("{pairs} lag-one pairs do not exceed p = {p}"),
        });
    }
    Ok((num / (phi * (pairs - p) as f64)).clamp(-MAX_CORR, MAX_CORR))
}

fn ar1_least_squares(sets: &[ResidualSet<'_>], phi: f64, p: usize) -> Result<f64> {
    let mut obs: Vec<(f64, f64)> = Vec::new();
    for s in sets {
        for w in 0..s.residuals.len().saturating_sub(1) {
            let gap = s.waves[w + 1] - s.waves[w];
            obs.push((s.residuals[w] * s.residuals[w + 1] / phi, gap));
        }
    }
    if obs.len() <= p {
        return Err(GeeError::StructureInfeasible {
            structure: "AR1",
            detail: format!("{} adjacent pairs do not exceed p = {p}", obs.len()),
        });
    }
    let loss = |a: f64| -> f64 { obs.iter().map(|&(prod, gap)| (prod - a.powf(gap)).powi(2)).sum() };
    Ok(golden_section(loss, 0.0, MAX_CORR, 1e-8))
}

/// Minimize a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    let mid = 0.5 * (lo + hi);
    // the bracket ends are candidates too when the minimum sits on a boundary
    [lo, mid, hi]
        .into_iter()
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap_or(mid)
}

fn unstructured(sets: &[ResidualSet<'_>], phi: f64, p: usize, grid: &WaveGrid) -> Result<DMatrix<f64>> {
    let t = grid.len();
    let mut sums = DMatrix::<f64>::zeros(t, t);
    let mut counts = DMatrix::<usize>::zeros(t, t);
    for s in sets {
        let idx: Vec<usize> = s
            .waves
            .iter()
            .map(|&w| {
                grid.index_of(w)
                    .ok_or_else(|| GeeError::InvalidData(format!("wave {w} not on grid")))
            })
            .collect::<Result<_>>()?;
        for j in 0..idx.len() {
            for k in (j + 1)..idx.len() {
                let (a, b) = (idx[j], idx[k]);
                sums[(a, b)] += s.residuals[j] * s.residuals[k];
                counts[(a, b)] += 1;
            }
        }
    }
    let mut est = DMatrix::identity(t, t);
    for a in 0..t {
        for b in (a + 1)..t {
            let n = counts[(a, b)];
            if n <= p {
                return Err(GeeError::StructureInfeasible {
                    structure: "UN",
                    detail: format!(
                        "wave pair ({}, {}) observed together in {n} clusters, need more than p = {p}",
                        grid.times()[a],
                        grid.times()[b]
                    ),
                });
            }
            let v = sums[(a, b)] / (phi * (n - p) as f64);
            est[(a, b)] = v;
            est[(b, a)] = v;
        }
    }
    Ok(est)
}
