//! Working-correlation selection criteria and candidate ranking.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;

use crate::correlation::CorrStructure;
use crate::data::LongitudinalDataset;
use crate::engine::{corrected_residual, fit, FitOptions, GeeFit};
use crate::error::{GeeError, Result};
use crate::family::Family;
use crate::linalg::{quad_form, trace};
use crate::par::{map_indexed, Execution};

/// The seven criteria, in the row order used by criteria tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Criterion {
    Cic,
    Dbar,
    Gpc,
    Qic,
    Rj1,
    Rj2,
    Sc,
}

impl Criterion {
    pub const ALL: [Criterion; 7] = [
        Criterion::Cic,
        Criterion::Dbar,
        Criterion::Gpc,
        Criterion::Qic,
        Criterion::Rj1,
        Criterion::Rj2,
        Criterion::Sc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Cic => "CIC",
            Criterion::Dbar => "DBAR",
            Criterion::Gpc => "GPC",
            Criterion::Qic => "QIC",
            Criterion::Rj1 => "RJ1",
            Criterion::Rj2 => "RJ2",
            Criterion::Sc => "SC",
        }
    }

    /// The raw criterion value.
    pub fn value(self, v: &CriterionValues) -> f64 {
        match self {
            Criterion::Cic => v.cic,
            Criterion::Dbar => v.dbar,
            Criterion::Gpc => v.gpc,
            Criterion::Qic => v.qic,
            Criterion::Rj1 => v.rj1,
            Criterion::Rj2 => v.rj2,
            Criterion::Sc => v.sc,
        }
    }

    /// The quantity minimised when selecting: the value itself, or its
    /// distance from the ideal for the RJ family.
    pub fn badness(self, v: &CriterionValues) -> f64 {
        match self {
            Criterion::Rj1 => (v.rj1 - 1.0).abs(),
            Criterion::Rj2 => (v.rj2 - 1.0).abs(),
            Criterion::Dbar => v.dbar.abs(),
            other => other.value(v),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = GeeError;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| GeeError::Config(format!("unknown criterion '{s}'")))
    }
}

/// All seven criteria for one fitted candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionValues {
    pub qic: f64,
    pub cic: f64,
    pub rj1: f64,
    pub rj2: f64,
    pub dbar: f64,
    pub sc: f64,
    pub gpc: f64,
}

fn require_converged(fit: &GeeFit) -> Result<()> {
    if fit.converged {
        Ok(())
    } else {
        Err(GeeError::NotConverged)
    }
}

/// `M_I = sum D' A^{-1} D`, the information of the independence model
/// evaluated at the candidate's estimates.
pub fn independence_information(fit: &GeeFit) -> DMatrix<f64> {
    let p = fit.p();
    let mut m = DMatrix::zeros(p, p);
    for c in &fit.clusters {
        let weighted = DMatrix::from_fn(c.len(), p, |i, j| c.d[(i, j)] / c.variance[i]);
        m += c.d.transpose() * weighted;
    }
    m
}

/// `tr(M_I Sigma)`.
pub fn cic_from_parts(m_i: &DMatrix<f64>, sandwich: &DMatrix<f64>) -> f64 {
    trace(&(m_i * sandwich))
}

/// `-2 QL + 2 tr(M_I Sigma)`.
pub fn qic_from_parts(ql: f64, m_i: &DMatrix<f64>, sandwich: &DMatrix<f64>) -> f64 {
    -2.0 * ql + 2.0 * cic_from_parts(m_i, sandwich)
}

/// `(tr(Q)/p, tr(Q^2)/p, RJ2 - 2 RJ1 + 1)` for `Q = M Sigma`.
pub fn rj_from_q(q: &DMatrix<f64>) -> (f64, f64, f64) {
    let p = q.nrows() as f64;
    let rj1 = trace(q) / p;
    let rj2 = trace(&(q * q)) / p;
    (rj1, rj2, rj2 - 2.0 * rj1 + 1.0)
}

pub fn qic(fit: &GeeFit) -> Result<f64> {
    require_converged(fit)?;
    Ok(qic_from_parts(fit.ql, &independence_information(fit), &fit.sandwich_cov))
}

pub fn cic(fit: &GeeFit) -> Result<f64> {
    require_converged(fit)?;
    Ok(cic_from_parts(&independence_information(fit), &fit.sandwich_cov))
}

pub fn rj(fit: &GeeFit) -> Result<(f64, f64, f64)> {
    require_converged(fit)?;
    Ok(rj_from_q(&(&fit.information * &fit.sandwich_cov)))
}

/// `sum e' V^{-1} e`.
pub fn sc(fit: &GeeFit) -> Result<f64> {
    require_converged(fit)?;
    Ok(sc_contributions(fit).iter().sum())
}

/// `sum e'(I - H')^{-1} V^{-1} (I - H)^{-1} e`.
pub fn gpc(fit: &GeeFit) -> Result<f64> {
    require_converged(fit)?;
    Ok(gpc_contributions(fit)?.iter().sum())
}

/// Per-cluster terms of SC.
pub fn sc_contributions(fit: &GeeFit) -> Vec<f64> {
    fit.clusters.iter().map(|c| quad_form(&c.v_inv, &c.resid)).collect()
}

/// Per-cluster terms of GPC.
pub fn gpc_contributions(fit: &GeeFit) -> Result<Vec<f64>> {
    (0..fit.n_clusters())
        .map(|i| {
            let corrected = corrected_residual(fit, i)?;
            Ok(quad_form(&fit.clusters[i].v_inv, &corrected))
        })
        .collect()
}

/// Evaluate every criterion, optionally accepting an unconverged fit.
pub fn evaluate(fit: &GeeFit, allow_unconverged: bool) -> Result<CriterionValues> {
    if !allow_unconverged {
        require_converged(fit)?;
    }
    let m_i = independence_information(fit);
    let cic = cic_from_parts(&m_i, &fit.sandwich_cov);
    let (rj1, rj2, dbar) = rj_from_q(&(&fit.information * &fit.sandwich_cov));
    Ok(CriterionValues {
        qic: -2.0 * fit.ql + 2.0 * cic,
        cic,
        rj1,
        rj2,
        dbar,
        sc: sc_contributions(fit).iter().sum(),
        gpc: gpc_contributions(fit)?.iter().sum(),
    })
}

/// One candidate's outcome within a selection run.
#[derive(Debug, Clone)]
pub struct CandidateOutcome {
    pub structure: CorrStructure,
    pub fit: Option<GeeFit>,
    pub values: Option<CriterionValues>,
    pub converged: bool,
    /// Why the candidate is missing from the ranking, if it is.
    pub excluded: Option<String>,
}

impl CandidateOutcome {
    /// An outcome from precomputed values, used for synthetic reports.
    pub fn from_values(structure: CorrStructure, values: CriterionValues) -> Self {
        CandidateOutcome {
            structure,
            fit: None,
            values: Some(values),
            converged: true,
            excluded: None,
        }
    }

    fn ranked(&self) -> Option<&CriterionValues> {
        if self.excluded.is_none() {
            self.values.as_ref()
        } else {
            None
        }
    }
}

/// Criteria for every candidate and the structure each criterion selects.
#[derive(Debug, Clone)]
pub struct CriteriaReport {
    pub candidates: Vec<CandidateOutcome>,
    /// Winners in [`Criterion::ALL`] order.
    pub winners: Vec<(Criterion, CorrStructure)>,
}

impl CriteriaReport {
    /// Rank candidates; ties go to the structure with fewer correlation parameters.
    pub fn from_candidates(candidates: Vec<CandidateOutcome>) -> Result<Self> {
        if candidates.iter().all(|c| c.ranked().is_none()) {
            return Err(GeeError::SelectionFailed);
        }
        let winners = Criterion::ALL
            .into_iter()
            .map(|crit| {
                let best = candidates
                    .iter()
                    .filter_map(|c| c.ranked().map(|v| (c.structure, crit.badness(v))))
                    .filter(|(_, b)| b.is_finite())
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                    .map(|(s, _)| s)
                    .ok_or(GeeError::SelectionFailed)?;
                Ok((crit, best))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CriteriaReport { candidates, winners })
    }

    pub fn winner(&self, criterion: Criterion) -> Option<CorrStructure> {
        self.winners.iter().find(|(c, _)| *c == criterion).map(|(_, s)| *s)
    }

    pub fn outcome(&self, structure: CorrStructure) -> Option<&CandidateOutcome> {
        self.candidates.iter().find(|c| c.structure == structure)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelectOptions {
    pub fit: FitOptions,
    /// Rank unconverged candidates instead of excluding them.
    pub allow_unconverged: bool,
    pub execution: Execution,
}

/// Fit every candidate, evaluate all criteria at each candidate's own
/// estimates and record each criterion's choice. Candidates that fail or do
/// not converge are flagged and left out of the ranking.
pub fn select(
    dataset: &LongitudinalDataset,
    family: Family,
    candidates: &[CorrStructure],
    options: &SelectOptions,
) -> Result<CriteriaReport> {
    if candidates.is_empty() {
        return Err(GeeError::Config("no candidate structures given".into()));
    }
    let outcomes = map_indexed(candidates.len(), options.execution, |k| {
        let structure = candidates[k];
        match fit(dataset, family, structure, &options.fit) {
            Ok(f) => {
                let converged = f.converged;
                let (values, mut excluded) = match evaluate(&f, true) {
                    Ok(v) => (Some(v), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                if !converged && !options.allow_unconverged && excluded.is_none() {
                    excluded = Some(format!("not converged after {} iterations", f.iterations));
                }
                CandidateOutcome {
                    structure,
                    fit: Some(f),
                    values,
                    converged,
                    excluded,
                }
            }
            Err(e) => CandidateOutcome {
                structure,
                fit: None,
                values: None,
                converged: false,
                excluded: Some(e.to_string()),
            },
        }
    });
    for o in &outcomes {
        if let Some(reason) = &o.excluded {
            warn!("candidate {} excluded: {reason}", o.structure);
        }
    }
    CriteriaReport::from_candidates(outcomes)
}
