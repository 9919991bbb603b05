//! Simulation designs: scenario cells, dataset generation and a synthetic
//! cohort shaped like a six-visit smoking study.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::copula::{feasible_bounds, generate_cluster, LatentSolver};
use crate::correlation::CorrStructure;
use crate::data::{Cluster, LongitudinalDataset};
use crate::error::{GeeError, Result};
use crate::family::Family;

/// Number of planned measurement occasions per subject.
pub const WAVES: usize = 5;
/// Cluster sizes and their probabilities in unbalanced designs.
pub const UNBALANCED_SIZES: [(usize, f64); 3] = [(3, 0.15), (4, 0.15), (5, 0.70)];
/// Exponent `lambda` of the unstructured truth `alpha^{|t - t'|^lambda}`.
pub const UN_EXPONENT: f64 = 0.5;
pub const SUBJECT_COUNTS: [usize; 2] = [50, 100];
pub const ALPHAS: [f64; 2] = [0.2, 0.4];
pub const TRUE_STRUCTURES: [CorrStructure; 3] = [CorrStructure::Ar1, CorrStructure::Exchangeable, CorrStructure::Unstructured];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Balance {
    Balanced,
    Unbalanced,
}

impl Balance {
    pub fn name(self) -> &'static str {
        match self {
            Balance::Balanced => "balanced",
            Balance::Unbalanced => "unbalanced",
        }
    }

    fn draw_size<R: Rng + ?Sized>(self, rng: &mut R) -> usize {
        match self {
            Balance::Balanced => WAVES,
            Balance::Unbalanced => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (size, prob) in UNBALANCED_SIZES {
                    acc += prob;
                    if u < acc {
                        return size;
                    }
                }
                WAVES
            }
        }
    }
}

impl fmt::Display for Balance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Balance {
    type Err = GeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "balanced" | "bal" => Ok(Balance::Balanced),
            "unbalanced" | "unbal" => Ok(Balance::Unbalanced),
            other => Err(GeeError::Scenario(format!("unknown balance '{other}'"))),
        }
    }
}

/// True correlation between occasions `t` and `s` under the simulated structure.
pub fn true_correlation(truth: CorrStructure, alpha: f64, t: f64, s: f64) -> f64 {
    if t == s {
        return 1.0;
    }
    let gap = (t - s).abs();
    match truth {
        CorrStructure::Independence => 0.0,
        CorrStructure::Ar1 => alpha.powf(gap),
        CorrStructure::Exchangeable => alpha,
        CorrStructure::Unstructured => alpha.powf(gap.powf(UN_EXPONENT)),
    }
}

/// One cell of the simulation design.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub family: Family,
    pub balance: Balance,
    pub n_subjects: usize,
    pub truth: CorrStructure,
    pub alpha: f64,
    /// Intercept, subject-level and occasion-level coefficients.
    pub beta: [f64; 3],
    pub replicates: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(family: Family, balance: Balance, n_subjects: usize, truth: CorrStructure, alpha: f64) -> Result<Self> {
        let spec = ScenarioSpec {
            family,
            balance,
            n_subjects,
            truth,
            alpha,
            beta: Self::default_beta(family)?,
            replicates: 1000,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_beta(family: Family) -> Result<[f64; 3]> {
        match family {
            Family::Binary => Ok([1.0, 0.38, 0.35]),
            Family::Poisson => Ok([1.0, 0.20, 0.40]),
            Family::Gaussian => Err(GeeError::Scenario("simulation supports binary and poisson outcomes".into())),
        }
    }

    pub fn with_replicates(mut self, replicates: usize) -> Self {
        self.replicates = replicates;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == Family::Gaussian {
            return Err(GeeError::Scenario("simulation supports binary and poisson outcomes".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(GeeError::Scenario(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.truth == CorrStructure::Independence {
            return Err(GeeError::Scenario("true structure must be ar1, exch or un".into()));
        }
        if self.n_subjects < 2 {
            return Err(GeeError::Scenario("need at least two subjects".into()));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(GeeError::Scenario("non-finite coefficients".into()));
        }
        Ok(())
    }

    /// Compact identifier, e.g. `binary:balanced:ar1:0.2:50`.
    pub fn descriptor(&self) -> String {
        format!(
            "{}:{}:{}:{}:{}",
            self.family.name(),
            self.balance,
            self.truth.token(),
            self.alpha,
            self.n_subjects
        )
    }

    pub fn target_matrix(&self, waves: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(waves.len(), waves.len(), |i, j| true_correlation(self.truth, self.alpha, waves[i], waves[j]))
    }

    /// Every mean the design can produce, one per (x1, x2) combination.
    pub fn possible_means(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4);
        for x1 in [0.0, 1.0] {
            for x2 in [0.0, 1.0] {
                out.push(self.family.inverse_link(self.beta[0] + self.beta[1] * x1 + self.beta[2] * x2));
            }
        }
        out
    }

    /// Check every wave pair and covariate combination against the attainable correlation range.
    pub fn check_feasibility(&self) -> Result<()> {
        let waves: Vec<f64> = (1..=WAVES).map(|t| t as f64).collect();
        let target = self.target_matrix(&waves);
        for x1 in [0.0, 1.0] {
            for xa in [0.0, 1.0] {
                for xb in [0.0, 1.0] {
                    let ma = self.family.inverse_link(self.beta[0] + self.beta[1] * x1 + self.beta[2] * xa);
                    let mb = self.family.inverse_link(self.beta[0] + self.beta[1] * x1 + self.beta[2] * xb);
                    let bounds = feasible_bounds(self.family, ma, mb)?;
                    for i in 0..WAVES {
                        for j in (i + 1)..WAVES {
                            let rho = target[(i, j)];
                            if !bounds.contains(rho) {
                                return Err(GeeError::RangeViolation {
                                    mean_a: ma,
                                    mean_b: mb,
                                    target: rho,
                                    lo: bounds.lo,
                                    hi: bounds.hi,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Random source for one replicate: the master seed selects the key and the
    /// replicate index selects an independent stream.
    pub fn replicate_rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate as u64);
        rng
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor())
    }
}

impl FromStr for ScenarioSpec {
    type Err = GeeError;

    /// Parses `family:balance:truth:alpha:n`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [family, balance, truth, alpha, n] = parts.as_slice() else {
            return Err(GeeError::Scenario(format!("expected family:balance:truth:alpha:n, got '{s}'")));
        };
        let family: Family = family.parse()?;
        let balance: Balance = balance.parse()?;
        let truth: CorrStructure = truth.parse()?;
        let alpha: f64 = alpha
            .parse()
            .map_err(|_| GeeError::Scenario(format!("bad alpha '{alpha}'")))?;
        let n: usize = n.parse().map_err(|_| GeeError::Scenario(format!("bad subject count '{n}'")))?;
        ScenarioSpec::new(family, balance, n, truth, alpha)
    }
}

/// The 48 design cells, grouped as in the reference tables: family, balance
/// and alpha select the table; truth and sample size the block within it.
pub fn all_scenarios() -> Vec<ScenarioSpec> {
    let mut out = Vec::with_capacity(48);
    for family in [Family::Binary, Family::Poisson] {
        for balance in [Balance::Balanced, Balance::Unbalanced] {
            for alpha in ALPHAS {
                for truth in TRUE_STRUCTURES {
                    for n in SUBJECT_COUNTS {
                        out.push(ScenarioSpec::new(family, balance, n, truth, alpha).expect("design cells are valid"));
                    }
                }
            }
        }
    }
    out
}

/// Generate replicate `replicate` of a scenario. Identical inputs give identical data.
///
/// Covariates: intercept, `x1 ~ Bernoulli(0.5)` per subject and
/// `x2 ~ Bernoulli(0.5)` per occasion. Unbalanced subjects keep their first
/// `n_i` occasions.
pub fn generate_dataset(spec: &ScenarioSpec, replicate: usize, solver: &LatentSolver) -> Result<LongitudinalDataset> {
    spec.validate()?;
    let mut rng = spec.replicate_rng(replicate);
    let mut clusters = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let n_i = spec.balance.draw_size(&mut rng);
        let x1 = f64::from(u8::from(rng.random_bool(0.5)));
        let mut x = DMatrix::zeros(n_i, 3);
        let mut means = Vec::with_capacity(n_i);
        for t in 0..n_i {
            let x2 = f64::from(u8::from(rng.random_bool(0.5)));
            x[(t, 0)] = 1.0;
            x[(t, 1)] = x1;
            x[(t, 2)] = x2;
            means.push(spec.family.inverse_link(spec.beta[0] + spec.beta[1] * x1 + spec.beta[2] * x2));
        }
        let waves: Vec<f64> = (1..=n_i).map(|t| t as f64).collect();
        let y = generate_cluster(spec.family, &means, &spec.target_matrix(&waves), solver, &mut rng)?;
        clusters.push(Cluster::new(format!("{}", i + 1), y, x, waves)?);
    }
    LongitudinalDataset::with_names(clusters, spec.family, vec!["intercept".into(), "x1".into(), "x2".into()])
}

/// Visit years of the synthetic cohort.
pub const COHORT_YEARS: [f64; 6] = [0.0, 2.0, 5.0, 7.0, 10.0, 15.0];

/// Covariate names of the synthetic cohort, in column order.
pub const COHORT_COVARIATES: [&str; 8] = [
    "intercept",
    "age/10",
    "age^2",
    "some_college",
    "college_degree",
    "year",
    "year^2",
    "year^3",
];

/// A synthetic binary cohort with the layout of a six-visit smoking study:
/// visits at years 0, 2, 5, 7, 10, 15 (time recorded in decades), baseline
/// age 18-30 (centred at 24, in decades, with its square), attained
/// education as two indicators and a cubic in time. Subjects attend the
/// first `n_i` visits, `n_i` in 1..=6. Responses follow a decaying serial
/// correlation `0.35 * 0.9^{years apart}`.
pub fn cohort_fixture(n_subjects: usize, seed: u64) -> Result<LongitudinalDataset> {
    let beta = [-0.6, 0.4, -0.5, -0.7, -1.3, 0.5, -0.9, 0.35];
    let solver = LatentSolver::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clusters = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let n_i = if rng.random_bool(0.6) { 6 } else { rng.random_range(1..=5) };
        let age = (rng.random_range(18.0..30.0) - 24.0) / 10.0;
        let education: f64 = rng.random();
        let (some, degree) = if education < 0.45 {
            (0.0, 0.0)
        } else if education < 0.75 {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let years = &COHORT_YEARS[..n_i];
        let waves: Vec<f64> = years.iter().map(|y| y / 10.0).collect();
        let x = DMatrix::from_fn(n_i, 8, |t, j| {
            let yr = waves[t];
            [1.0, age, age * age, some, degree, yr, yr * yr, yr * yr * yr][j]
        });
        let means: Vec<f64> = (0..n_i)
            .map(|t| Family::Binary.inverse_link((0..8).map(|j| x[(t, j)] * beta[j]).sum()))
            .collect();
        let target = DMatrix::from_fn(n_i, n_i, |a, b| {
            if a == b {
                1.0
            } else {
                0.35 * 0.9f64.powf((years[a] - years[b]).abs())
            }
        });
        let y = generate_cluster(Family::Binary, &means, &target, &solver, &mut rng)?;
        clusters.push(Cluster::new(format!("S{:04}", i + 1), y, x, waves)?);
    }
    LongitudinalDataset::with_names(
        clusters,
        Family::Binary,
        COHORT_COVARIATES.iter().map(|s| s.to_string()).collect(),
    )
}

/// Plain `y` vectors of a dataset, for byte-level comparisons.
pub fn responses(dataset: &LongitudinalDataset) -> Vec<DVector<f64>> {
    dataset.clusters().iter().map(|c| c.y.clone()).collect()
}
