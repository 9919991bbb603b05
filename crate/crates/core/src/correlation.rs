//! Working-correlation structures and their realization for a given set of
//! wave times.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;

use crate::data::WaveGrid;
use crate::error::{GeeError, Result};
use crate::linalg::{is_positive_definite, repair_correlation, EIGEN_FLOOR};

/// Off-diagonal correlations are kept inside `[-MAX_CORR, MAX_CORR]`.
pub const MAX_CORR: f64 = 0.99;

/// Structure kinds, declared from simplest to most complex. The derived
/// ordering is the tie-break order used when ranking candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CorrStructure {
    Independence,
    Ar1,
    Exchangeable,
    Unstructured,
}

impl CorrStructure {
    pub const ALL: [CorrStructure; 4] = [
        CorrStructure::Independence,
        CorrStructure::Ar1,
        CorrStructure::Exchangeable,
        CorrStructure::Unstructured,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorrStructure::Independence => "Indep",
            CorrStructure::Ar1 => "AR1",
            CorrStructure::Exchangeable => "Exch",
            CorrStructure::Unstructured => "UN",
        }
    }

    /// Lowercase token used on the command line and in config files.
    pub fn token(self) -> &'static str {
        match self {
            CorrStructure::Independence => "indep",
            CorrStructure::Ar1 => "ar1",
            CorrStructure::Exchangeable => "exch",
            CorrStructure::Unstructured => "un",
        }
    }
}

impl fmt::Display for CorrStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorrStructure {
    type Err = GeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "indep" | "independence" | "ind" => Ok(CorrStructure::Independence),
            "ar1" | "ar(1)" | "ar-1" => Ok(CorrStructure::Ar1),
            "exch" | "exchangeable" | "cs" => Ok(CorrStructure::Exchangeable),
            "un" | "unstructured" => Ok(CorrStructure::Unstructured),
            other => Err(GeeError::Config(format!("unknown correlation structure '{other}'"))),
        }
    }
}

/// A structure together with its association parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkingCorrelation {
    Independence,
    Ar1 { alpha: f64 },
    Exchangeable { alpha: f64 },
    /// Full correlation matrix over the dataset's wave grid.
    Unstructured { grid: WaveGrid, alpha: DMatrix<f64> },
}

impl WorkingCorrelation {
    pub fn kind(&self) -> CorrStructure {
        match self {
            WorkingCorrelation::Independence => CorrStructure::Independence,
            WorkingCorrelation::Ar1 { .. } => CorrStructure::Ar1,
            WorkingCorrelation::Exchangeable { .. } => CorrStructure::Exchangeable,
            WorkingCorrelation::Unstructured { .. } => CorrStructure::Unstructured,
        }
    }

    /// Starting value (zero association) for a structure.
    pub fn initial(kind: CorrStructure, grid: &WaveGrid) -> Self {
        match kind {
            CorrStructure::Independence => WorkingCorrelation::Independence,
            CorrStructure::Ar1 => WorkingCorrelation::Ar1 { alpha: 0.0 },
            CorrStructure::Exchangeable => WorkingCorrelation::Exchangeable { alpha: 0.0 },
            CorrStructure::Unstructured => WorkingCorrelation::Unstructured {
                grid: grid.clone(),
                alpha: DMatrix::identity(grid.len(), grid.len()),
            },
        }
    }

    /// Build an unstructured correlation from a (possibly indefinite) moment
    /// estimate: entries are clamped, the diagonal reset to one, and the
    /// matrix repaired to positive definiteness when needed. Returns whether
    /// a repair took place.
    pub fn unstructured(grid: WaveGrid, estimate: &DMatrix<f64>) -> Result<(Self, bool)> {
        let t = grid.len();
        if estimate.nrows() != t || estimate.ncols() != t {
            return Err(GeeError::InvalidData(format!(
                "unstructured matrix is {}x{}, wave grid has {t} times",
                estimate.nrows(),
                estimate.ncols()
            )));
        }
        let clamped = DMatrix::from_fn(t, t, |i, j| {
            if i == j {
                1.0
            } else {
                (0.5 * (estimate[(i, j)] + estimate[(j, i)])).clamp(-MAX_CORR, MAX_CORR)
            }
        });
        let (alpha, repaired) = repair_correlation(&clamped, EIGEN_FLOOR);
        if repaired {
            warn!("unstructured working correlation repaired to positive definite");
        }
        Ok((WorkingCorrelation::Unstructured { grid, alpha }, repaired))
    }

    /// Scalar association parameter for AR1/Exch.
    pub fn scalar_alpha(&self) -> Option<f64> {
        match self {
            WorkingCorrelation::Ar1 { alpha } | WorkingCorrelation::Exchangeable { alpha } => Some(*alpha),
            _ => None,
        }
    }

    /// Correlation matrix for a cluster observed at `waves`.
    pub fn matrix(&self, waves: &[f64]) -> Result<DMatrix<f64>> {
        build_correlation(self, waves)
    }
}

/// Realize the working correlation for one cluster's wave times.
///
/// AR1 uses the true time gap as exponent, so unequally spaced waves are
/// handled; UN takes the principal submatrix of the grid-level matrix.
pub fn build_correlation(corr: &WorkingCorrelation, waves: &[f64]) -> Result<DMatrix<f64>> {
    let n = waves.len();
    let m = match corr {
        WorkingCorrelation::Independence => return Ok(DMatrix::identity(n, n)),
        WorkingCorrelation::Exchangeable { alpha } => {
            check_scalar("Exch", *alpha)?;
            let a = alpha.clamp(-MAX_CORR, MAX_CORR);
            DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { a })
        }
        WorkingCorrelation::Ar1 { alpha } => {
            check_scalar("AR1", *alpha)?;
            let mut m = DMatrix::identity(n, n);
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = ar1_entry(*alpha, waves[j] - waves[i])?.clamp(-MAX_CORR, MAX_CORR);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            m
        }
        WorkingCorrelation::Unstructured { grid, alpha } => {
            let idx = waves
                .iter()
                .map(|&t| {
                    grid.index_of(t).ok_or_else(|| {
                        GeeError::InvalidData(format!("wave time {t} is not on the wave grid"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            DMatrix::from_fn(n, n, |i, j| alpha[(idx[i], idx[j])])
        }
    };
    if n > 1 && !is_positive_definite(&m) {
        return Err(GeeError::NotPositiveDefinite {
            cluster: "<unknown>".into(),
        });
    }
    Ok(m)
}

fn check_scalar(kind: &'static str, alpha: f64) -> Result<()> {
    if !(alpha > -1.0 && alpha < 1.0) {
        return Err(GeeError::Parameter { kind, value: alpha });
    }
    Ok(())
}

/// `alpha^gap`; integer gaps use an exact integer power so negative alpha is
/// allowed, fractional gaps require `alpha >= 0`.
fn ar1_entry(alpha: f64, gap: f64) -> Result<f64> {
    if gap.fract() == 0.0 && gap.abs() <= i32::MAX as f64 {
        return Ok(alpha.powi(gap as i32));
    }
    if alpha < 0.0 {
        return Err(GeeError::Parameter {
            kind: "AR1 (fractional time gap)",
            value: alpha,
        });
    }
    Ok(alpha.powf(gap))
}
