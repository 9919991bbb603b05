//! Correlated binary and count outcome generation for simulation studies.

pub mod bvn;
pub mod copula;
pub mod scenario;

pub use copula::{
    feasible_bounds, generate_cluster, implied_correlation, solve_latent_correlation, CorrelationBounds, LatentSolver, Margin,
};
pub use scenario::{
    all_scenarios, cohort_fixture, generate_dataset, true_correlation, Balance, ScenarioSpec, COHORT_COVARIATES, COHORT_YEARS,
};
