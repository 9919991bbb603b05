//! Wald and robust score tests of linear hypotheses `C beta = r`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::correlation::CorrStructure;
use crate::data::LongitudinalDataset;
use crate::engine::{fit_with_offset, FitOptions, GeeFit};
use crate::error::{GeeError, Result};
use crate::family::{mean_response, Family};
use crate::linalg::{null_space, spd_inverse, symmetrize};

/// `H0: C beta = r` with `C` of full row rank `q <= p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHypothesis {
    c: DMatrix<f64>,
    r: DVector<f64>,
}

impl LinearHypothesis {
    pub fn new(c: DMatrix<f64>, r: DVector<f64>) -> Result<Self> {
        let (q, p) = c.shape();
        if q == 0 || q > p {
            return Err(GeeError::InvalidHypothesis(format!("contrast has {q} rows for {p} coefficients")));
        }
        if r.len() != q {
            return Err(GeeError::InvalidHypothesis(format!("r has length {}, expected {q}", r.len())));
        }
        if c.iter().chain(r.iter()).any(|v| !v.is_finite()) {
            return Err(GeeError::InvalidHypothesis("non-finite entries".into()));
        }
        if c.rank(1e-10 * c.abs().max().max(1.0)) < q {
            return Err(GeeError::InvalidHypothesis("contrast matrix is not of full row rank".into()));
        }
        Ok(LinearHypothesis { c, r })
    }

    /// `C beta = 0`.
    pub fn homogeneous(c: DMatrix<f64>) -> Result<Self> {
        let q = c.nrows();
        Self::new(c, DVector::zeros(q))
    }

    /// Joint test that the listed coefficients are zero.
    pub fn coefficients(indices: &[usize], p: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= p) {
            return Err(GeeError::InvalidHypothesis(format!("coefficient {bad} out of range for p = {p}")));
        }
        let mut c = DMatrix::zeros(indices.len(), p);
        for (row, &j) in indices.iter().enumerate() {
            c[(row, j)] = 1.0;
        }
        Self::homogeneous(c)
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn q(&self) -> usize {
        self.c.nrows()
    }

    pub fn p(&self) -> usize {
        self.c.ncols()
    }

    /// Coordinates fixed by the hypothesis when every row of `C` is a distinct unit vector.
    fn selected_coordinates(&self) -> Option<Vec<usize>> {
        let mut picked = Vec::with_capacity(self.q());
        for row in self.c.row_iter() {
            let nonzero: Vec<usize> = (0..row.len()).filter(|&j| row[j] != 0.0).collect();
            match nonzero.as_slice() {
                [j] if row[*j] == 1.0 && !picked.contains(j) => picked.push(*j),
                _ => return None,
            }
        }
        Some(picked)
    }

    /// A particular solution `beta0` and a basis `N` of the free directions, so
    /// that every `beta` satisfying the hypothesis is `beta0 + N gamma`.
    fn parameterization(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.p();
        if let Some(fixed) = self.selected_coordinates() {
            let mut beta0 = DVector::zeros(p);
            for (row, &j) in fixed.iter().enumerate() {
                beta0[j] = self.r[row];
            }
            let free: Vec<usize> = (0..p).filter(|j| !fixed.contains(j)).collect();
            let mut n = DMatrix::zeros(p, free.len());
            for (col, &j) in free.iter().enumerate() {
                n[(j, col)] = 1.0;
            }
            return Ok((beta0, n));
        }
        let cct_inv = spd_inverse(&(&self.c * self.c.transpose())).ok_or(GeeError::Singular("C C'"))?;
        let beta0 = self.c.transpose() * cct_inv * &self.r;
        Ok((beta0, null_space(&self.c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    Wald,
    Score,
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestKind::Wald => "wald",
            TestKind::Score => "score",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub kind: TestKind,
}

fn chi_square_result(statistic: f64, df: usize, kind: TestKind) -> Result<TestResult> {
    if !statistic.is_finite() {
        return Err(GeeError::Singular("test statistic"));
    }
    let statistic = statistic.max(0.0);
    let dist = ChiSquared::new(df as f64).map_err(|e| GeeError::InvalidHypothesis(e.to_string()))?;
    Ok(TestResult {
        statistic,
        df,
        p_value: dist.sf(statistic).clamp(0.0, 1.0),
        kind,
    })
}

/// `(C b - r)' (C Sigma C')^{-1} (C b - r)` with the empirical covariance `Sigma`.
pub fn wald_test(fit: &GeeFit, hypothesis: &LinearHypothesis) -> Result<TestResult> {
    if !fit.converged {
        return Err(GeeError::NotConverged);
    }
    if hypothesis.p() != fit.p() {
        return Err(GeeError::InvalidHypothesis(format!(
            "hypothesis has {} columns, model has {} coefficients",
            hypothesis.p(),
            fit.p()
        )));
    }
    let c = hypothesis.c();
    let diff = c * &fit.beta - hypothesis.r();
    let middle = symmetrize(&(c * &fit.sandwich_cov * c.transpose()));
    let inv = spd_inverse(&middle).ok_or(GeeError::Singular("C Sigma C'"))?;
    let stat = (diff.transpose() * inv * &diff)[(0, 0)];
    chi_square_result(stat, hypothesis.q(), TestKind::Wald)
}

/// Generalized robust score test.
///
/// The model is refitted under `H0` as `beta = beta0 + N gamma`; at the
/// restricted estimate `beta~` the full score `U = sum U_i`, `U_i = D_i' V_i^{-1} e_i`,
/// its sensitivity `A = sum D_i' V_i^{-1} D_i` and empirical variance
/// `B = sum U_i U_i'` give
///
/// `T = U' A^{-1} C' [C A^{-1} B A^{-1} C']^{-1} C A^{-1} U`,
///
/// referred to a chi-square with `q` degrees of freedom.
pub fn score_test(
    dataset: &LongitudinalDataset,
    family: Family,
    structure: CorrStructure,
    hypothesis: &LinearHypothesis,
    options: &FitOptions,
) -> Result<TestResult> {
    let p = dataset.p();
    if hypothesis.p() != p {
        return Err(GeeError::InvalidHypothesis(format!(
            "hypothesis has {} columns, model has {p} coefficients",
            hypothesis.p()
        )));
    }
    if hypothesis.q() == p {
        return Err(GeeError::InvalidHypothesis(
            "hypothesis fixes every coefficient; nothing left to fit under the null".into(),
        ));
    }
    let (beta0, basis) = hypothesis.parameterization()?;
    let names = (0..basis.ncols()).map(|k| format!("gamma{k}")).collect();
    let reduced = dataset.with_design(&basis, names)?;
    let offsets: Vec<DVector<f64>> = dataset.clusters().iter().map(|c| &c.x * &beta0).collect();
    let restricted = fit_with_offset(&reduced, family, structure, options, &offsets)?;
    if !restricted.converged {
        return Err(GeeError::NotConverged);
    }
    let beta = &beta0 + &basis * &restricted.beta;

    let mut a = DMatrix::zeros(p, p);
    let mut b = DMatrix::zeros(p, p);
    let mut u = DVector::zeros(p);
    for (c, rf) in dataset.clusters().iter().zip(&restricted.clusters) {
        let d = mean_response(family, &c.x, &beta).d;
        let dt_vinv = d.transpose() * &rf.v_inv;
        let ui = &dt_vinv * &rf.resid;
        a += &dt_vinv * &d;
        b += &ui * ui.transpose();
        u += ui;
    }
    let a_inv = spd_inverse(&symmetrize(&a)).ok_or(GeeError::Singular("score sensitivity"))?;
    let c = hypothesis.c();
    let projected = c * &a_inv * &u;
    let cov = symmetrize(&(c * &a_inv * b * &a_inv * c.transpose()));
    let cov_inv = spd_inverse(&cov).ok_or(GeeError::Singular("score covariance"))?;
    let stat = (projected.transpose() * cov_inv * &projected)[(0, 0)];
    chi_square_result(stat, hypothesis.q(), TestKind::Score)
}
