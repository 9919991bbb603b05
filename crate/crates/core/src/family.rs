//! Distribution families: link, inverse link, variance function and
//! quasi-likelihood.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::GeeError;

/// Bound applied to the linear predictor of the discrete families before the
/// inverse link.
pub const ETA_BOUND: f64 = 30.0;
/// Bound keeping Bernoulli means strictly inside (0, 1).
pub const PROB_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Bernoulli outcome with logit link.
    Binary,
    /// Poisson count with log link.
    Poisson,
    /// Gaussian outcome with identity link and unit variance function.
    Gaussian,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Binary => "binary",
            Family::Poisson => "poisson",
            Family::Gaussian => "gaussian",
        }
    }

    fn clamp_eta(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            _ => eta.clamp(-ETA_BOUND, ETA_BOUND),
        }
    }

    fn clamp_mu(self, mu: f64) -> f64 {
        match self {
            Family::Binary => mu.clamp(PROB_EPS, 1.0 - PROB_EPS),
            Family::Poisson => mu.max(f64::MIN_POSITIVE),
            Family::Gaussian => mu,
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        let mu = self.clamp_mu(mu);
        match self {
            Family::Binary => (mu / (1.0 - mu)).ln(),
            Family::Poisson => mu.ln(),
            Family::Gaussian => mu,
        }
    }

    pub fn inverse_link(self, eta: f64) -> f64 {
        let eta = self.clamp_eta(eta);
        let mu = match self {
            Family::Binary => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Family::Poisson => eta.exp(),
            Family::Gaussian => eta,
        };
        self.clamp_mu(mu)
    }

    /// `dmu/deta` expressed through the (clamped) mean.
    pub fn mu_eta(self, mu: f64) -> f64 {
        match self {
            Family::Binary => mu * (1.0 - mu),
            Family::Poisson => mu,
            Family::Gaussian => 1.0,
        }
    }

    /// `g'(mu)`, the reciprocal of [`Family::mu_eta`].
    pub fn link_derivative(self, mu: f64) -> f64 {
        1.0 / self.mu_eta(mu)
    }

    /// Variance function `h(mu)`.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Binary => mu * (1.0 - mu),
            Family::Poisson => mu,
            Family::Gaussian => 1.0,
        }
    }

    /// Quasi-likelihood contribution of one observation, multiplied by `phi`.
    ///
    /// Binary: `y log(mu/(1-mu)) + log(1-mu)`; Poisson: `y log(mu) - mu`;
    /// Gaussian: `-(y-mu)^2/2`.
    pub fn quasi_likelihood_obs(self, y: f64, mu: f64, phi: f64) -> f64 {
        let mu = self.clamp_mu(mu);
        let ql = match self {
            Family::Binary => y * (mu / (1.0 - mu)).ln() + (1.0 - mu).ln(),
            Family::Poisson => {
                if y == 0.0 {
                    -mu
                } else {
                    y * mu.ln() - mu
                }
            }
            Family::Gaussian => -0.5 * (y - mu).powi(2),
        };
        phi * ql
    }

    /// Check that an observed response is admissible for the family.
    pub fn validate_response(self, y: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self {
            Family::Binary => y == 0.0 || y == 1.0,
            Family::Poisson => y >= 0.0 && y.fract() == 0.0,
            Family::Gaussian => true,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = GeeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" | "binomial" | "bernoulli" => Ok(Family::Binary),
            "poisson" | "count" => Ok(Family::Poisson),
            "gaussian" | "normal" => Ok(Family::Gaussian),
            other => Err(GeeError::Config(format!("unknown family '{other}'"))),
        }
    }
}

/// Mean-model quantities for one cluster at a given coefficient vector.
#[derive(Debug, Clone)]
pub struct MeanResponse {
    pub mu: DVector<f64>,
    /// `D = dmu/dbeta`, n x p.
    pub d: DMatrix<f64>,
    /// Diagonal of `A`, the variance function at `mu`.
    pub variance: DVector<f64>,
    /// Diagonal of `L`, the link derivative at `mu`.
    pub link_derivative: DVector<f64>,
}

pub fn mean_response(family: Family, x: &DMatrix<f64>, beta: &DVector<f64>) -> MeanResponse {
    mean_response_with_offset(family, x, beta, None)
}

pub fn mean_response_with_offset(
    family: Family,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    offset: Option<&DVector<f64>>,
) -> MeanResponse {
    let mut eta = x * beta;
    if let Some(off) = offset {
        eta += off;
    }
    let mu = eta.map(|e| family.inverse_link(e));
    let deriv = mu.map(|m| family.mu_eta(m));
    let mut d = x.clone();
    for (mut row, &g) in d.row_iter_mut().zip(deriv.iter()) {
        row *= g;
    }
    MeanResponse {
        variance: mu.map(|m| family.variance(m)),
        link_derivative: deriv.map(|g| 1.0 / g),
        mu,
        d,
    }
}

/// Total quasi-likelihood of a response vector.
pub fn quasi_likelihood(family: Family, y: &DVector<f64>, mu: &DVector<f64>, phi: f64) -> f64 {
    y.iter()
        .zip(mu.iter())
        .map(|(&yi, &mi)| family.quasi_likelihood_obs(yi, mi, phi))
        .sum()
}
