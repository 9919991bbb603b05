//! Gaussian-copula generation of correlated Bernoulli and Poisson vectors
//! with prescribed margins and pairwise Pearson correlations.

use std::collections::HashMap;
use std::sync::Mutex;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::bvn::{bvn_upper, norm_cdf, norm_quantile};
use crate::error::{GeeError, Result};
use crate::family::Family;
use crate::linalg::{repair_correlation, EIGEN_FLOOR};

/// Survival probabilities below this are treated as zero when summing moments.
const TAIL_EPS: f64 = 1e-16;
/// Endpoints of the latent-correlation search interval.
pub const LATENT_LIMIT: f64 = 0.999;

/// A Bernoulli or Poisson margin with the quantities the copula needs.
#[derive(Debug, Clone, PartialEq)]
pub enum Margin {
    Bernoulli { p: f64 },
    /// `survival[j] = P(Y > j)`, truncated once negligible or past `mu + 20 sqrt(mu)`.
    Poisson { mu: f64, survival: Vec<f64> },
}

impl Margin {
    pub fn new(family: Family, mean: f64) -> Result<Self> {
        match family {
            Family::Binary if mean > 0.0 && mean < 1.0 => Ok(Margin::Bernoulli { p: mean }),
            Family::Poisson if mean > 0.0 && mean.is_finite() => {
                let cutoff = (mean + 20.0 * mean.sqrt()).ceil() as usize;
                let mut pmf = Vec::with_capacity(cutoff + 1);
                let mut term = (-mean).exp();
                for k in 0..=cutoff {
                    if k > 0 {
                        term *= mean / k as f64;
                    }
                    pmf.push(term);
                }
                // tail sums from the top keep small survival values accurate
                let mut survival = vec![0.0; cutoff + 1];
                let mut acc = 0.0;
                for k in (0..cutoff).rev() {
                    acc += pmf[k + 1];
                    survival[k] = acc;
                }
                let keep = survival.iter().position(|&s| s < TAIL_EPS).unwrap_or(cutoff);
                survival.truncate(keep.max(1));
                Ok(Margin::Poisson { mu: mean, survival })
            }
            Family::Gaussian => Err(GeeError::InvalidMargin("the copula generator supports binary and poisson margins".into())),
            _ => Err(GeeError::InvalidMargin(format!("mean {mean} invalid for {family}"))),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Margin::Bernoulli { p } => *p,
            Margin::Poisson { mu, .. } => *mu,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Margin::Bernoulli { p } => p * (1.0 - p),
            Margin::Poisson { mu, .. } => *mu,
        }
    }

    /// `P(Y >= j)` for `j = 1, 2, ...` until negligible.
    fn upper_tails(&self) -> Vec<f64> {
        match self {
            Margin::Bernoulli { p } => vec![*p],
            Margin::Poisson { survival, .. } => survival.clone(),
        }
    }

    /// Map a standard normal latent value to the outcome by inversion.
    pub fn invert(&self, z: f64) -> f64 {
        // compare on the upper tail so large z keeps full precision
        let tail = norm_cdf(-z);
        match self {
            Margin::Bernoulli { p } => f64::from(tail < *p),
            Margin::Poisson { survival, .. } => {
                let k = survival.iter().position(|&s| s <= tail).unwrap_or(survival.len());
                k as f64
            }
        }
    }
}

/// Attainable Pearson correlation range for a pair of margins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationBounds {
    pub lo: f64,
    pub hi: f64,
}

impl CorrelationBounds {
    pub fn contains(&self, rho: f64) -> bool {
        rho >= self.lo && rho <= self.hi
    }
}

fn frechet_bounds(a: &Margin, b: &Margin) -> CorrelationBounds {
    let (ta, tb) = (a.upper_tails(), b.upper_tails());
    let (mut upper, mut lower) = (0.0, 0.0);
    for &sa in &ta {
        for &sb in &tb {
            upper += sa.min(sb);
            lower += (sa + sb - 1.0).max(0.0);
        }
    }
    let prod = a.mean() * b.mean();
    let scale = (a.variance() * b.variance()).sqrt();
    CorrelationBounds {
        lo: ((lower - prod) / scale).max(-1.0),
        hi: ((upper - prod) / scale).min(1.0),
    }
}

/// Fréchet bounds on the Pearson correlation of two margins.
///
/// Binary pairs use the closed form; Poisson pairs sum the comonotone and
/// antimonotone joint survival functions `min(S_a, S_b)` and
/// `max(0, S_a + S_b - 1)` over the (truncated) support.
pub fn feasible_bounds(family: Family, mean_a: f64, mean_b: f64) -> Result<CorrelationBounds> {
    let (a, b) = (Margin::new(family, mean_a)?, Margin::new(family, mean_b)?);
    Ok(match family {
        Family::Binary => {
            let (pa, pb) = (mean_a, mean_b);
            let (qa, qb) = (1.0 - pa, 1.0 - pb);
            CorrelationBounds {
                lo: f64::max(-(pa * pb / (qa * qb)).sqrt(), -(qa * qb / (pa * pb)).sqrt()),
                hi: f64::min((pa * qb / (qa * pb)).sqrt(), (qa * pb / (pa * qb)).sqrt()),
            }
        }
        _ => frechet_bounds(&a, &b),
    })
}

/// Pearson correlation of the discretized pair when the latent normals have correlation `delta`.
pub fn implied_correlation(a: &Margin, b: &Margin, delta: f64) -> f64 {
    let ca: Vec<f64> = a.upper_tails().iter().map(|&s| -norm_quantile(s)).collect();
    let cb: Vec<f64> = b.upper_tails().iter().map(|&s| -norm_quantile(s)).collect();
    let mut joint = 0.0;
    for &h in &ca {
        for &k in &cb {
            joint += bvn_upper(h, k, delta);
        }
    }
    (joint - a.mean() * b.mean()) / (a.variance() * b.variance()).sqrt()
}

/// Latent normal correlation whose discretization has Pearson correlation `rho`,
/// found by bisection on `[-0.999, 0.999]`.
pub fn solve_latent_correlation(family: Family, mean_a: f64, mean_b: f64, rho: f64) -> Result<f64> {
    let bounds = feasible_bounds(family, mean_a, mean_b)?;
    if !rho.is_finite() || !bounds.contains(rho) {
        return Err(GeeError::RangeViolation {
            mean_a,
            mean_b,
            target: rho,
            lo: bounds.lo,
            hi: bounds.hi,
        });
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    let (a, b) = (Margin::new(family, mean_a)?, Margin::new(family, mean_b)?);
    let (mut lo, mut hi) = (-LATENT_LIMIT, LATENT_LIMIT);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if implied_correlation(&a, &b, mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Memoizing wrapper around [`solve_latent_correlation`], shareable across threads.
#[derive(Debug, Default)]
pub struct LatentSolver {
    cache: Mutex<HashMap<(Family, u64, u64, u64), f64>>,
}

impl LatentSolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn solve(&self, family: Family, mean_a: f64, mean_b: f64, rho: f64) -> Result<f64> {
        let (m1, m2) = if mean_a <= mean_b { (mean_a, mean_b) } else { (mean_b, mean_a) };
        let key = (family, m1.to_bits(), m2.to_bits(), rho.to_bits());
        if let Some(&d) = self.cache.lock().expect("solver cache poisoned").get(&key) {
            return Ok(d);
        }
        let d = solve_latent_correlation(family, m1, m2, rho)?;
        self.cache.lock().expect("solver cache poisoned").insert(key, d);
        Ok(d)
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("solver cache poisoned").len()
    }

    /// Latent correlation matrix for the given means and target matrix,
    /// repaired to positive definiteness if the pairwise solutions are not jointly valid.
    pub fn latent_matrix(&self, family: Family, means: &[f64], target: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
        let n = means.len();
        if target.nrows() != n || target.ncols() != n {
            return Err(GeeError::Generation(format!(
                "target matrix is {}x{} for {n} means",
                target.nrows(),
                target.ncols()
            )));
        }
        let mut latent = DMatrix::identity(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self.solve(family, means[i], means[j], target[(i, j)])?;
                latent[(i, j)] = d;
                latent[(j, i)] = d;
            }
        }
        let (fixed, repaired) = repair_correlation(&latent, EIGEN_FLOOR);
        if repaired {
            warn!("latent correlation matrix repaired to positive definite");
        }
        Ok((fixed, repaired))
    }
}

/// Draw one cluster with margins `family(means[t])` and pairwise Pearson
/// correlations `target[(s, t)]`.
pub fn generate_cluster<R: Rng + ?Sized>(
    family: Family,
    means: &[f64],
    target: &DMatrix<f64>,
    solver: &LatentSolver,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let margins = means.iter().map(|&m| Margin::new(family, m)).collect::<Result<Vec<_>>>()?;
    let (latent, _) = solver.latent_matrix(family, means, target)?;
    let chol = latent
        .cholesky()
        .ok_or_else(|| GeeError::Generation("latent correlation matrix not positive definite after repair".into()))?;
    let eps = DVector::from_fn(means.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let z = chol.l() * eps;
    Ok(DVector::from_fn(means.len(), |t, _| margins[t].invert(z[t])))
}
