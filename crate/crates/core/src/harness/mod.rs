//! Monte Carlo study runner: generate, fit every candidate, rank, aggregate.

mod report;

use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::correlation::CorrStructure;
use crate::criteria::{evaluate, CandidateOutcome, CriteriaReport, Criterion};
use crate::engine::{fit, FitOptions, PhiMode};
use crate::error::{GeeError, Result};
use crate::par::{map_indexed, Execution};
use crate::simgen::{generate_dataset, LatentSolver, ScenarioSpec};

pub use report::{
    cell_seed, format_significant, reference_mse, reference_proportions, replicate_report, table_cells, table_of, ReferenceMse, ReferenceProportion,
    ReportBundle, ReportConfig, TableId, MSE_TOLERANCE, PROPORTION_TOLERANCE,
};

/// Share of failed replicates above which a scenario is flagged as degraded.
pub const DEGRADED_FAILURE_RATE: f64 = 0.05;

/// Candidate structures when the unstructured matrix is left out.
pub const REDUCED_CANDIDATES: [CorrStructure; 3] = [CorrStructure::Independence, CorrStructure::Ar1, CorrStructure::Exchangeable];

#[derive(Debug, Clone)]
pub struct HarnessOptions {
    pub fit: FitOptions,
    pub execution: Execution,
}

impl Default for HarnessOptions {
    /// Simulations assume no over-dispersion, so `phi` is held at one.
    fn default() -> Self {
        HarnessOptions {
            fit: FitOptions::default().with_phi(PhiMode::FixedOne),
            execution: Execution::default(),
        }
    }
}

/// Aggregated outcome of one scenario cell.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub spec: ScenarioSpec,
    pub candidates: Vec<CorrStructure>,
    pub criteria: Vec<Criterion>,
    /// `wins[c][k]`: replicates in which criterion `c` chose candidate `k`.
    pub wins: Vec<Vec<u64>>,
    /// `sq_error_sums[j][k]`: summed squared error of coefficient `j` under candidate `k`.
    pub sq_error_sums: Vec<Vec<f64>>,
    pub replicates_completed: usize,
    pub replicates_failed: usize,
    pub degraded: bool,
    pub wall_time: Duration,
}

impl ScenarioResult {
    fn index(&self, criterion: Criterion, structure: CorrStructure) -> Option<(usize, usize)> {
        let c = self.criteria.iter().position(|&x| x == criterion)?;
        let k = self.candidates.iter().position(|&x| x == structure)?;
        Some((c, k))
    }

    /// Share of completed replicates in which `criterion` chose `structure`.
    pub fn proportion(&self, criterion: Criterion, structure: CorrStructure) -> Option<f64> {
        let (c, k) = self.index(criterion, structure)?;
        (self.replicates_completed > 0).then(|| self.wins[c][k] as f64 / self.replicates_completed as f64)
    }

    /// Share of completed replicates in which `criterion` chose the true structure.
    pub fn correct_selection(&self, criterion: Criterion) -> Option<f64> {
        self.proportion(criterion, self.spec.truth)
    }

    /// Mean squared error of coefficient `j` when fitting `structure`.
    pub fn mse(&self, j: usize, structure: CorrStructure) -> Option<f64> {
        let k = self.candidates.iter().position(|&x| x == structure)?;
        let row = self.sq_error_sums.get(j)?;
        (self.replicates_completed > 0).then(|| row[k] / self.replicates_completed as f64)
    }

    /// Monte Carlo standard error of a proportion.
    pub fn proportion_se(&self, criterion: Criterion, structure: CorrStructure) -> Option<f64> {
        let p = self.proportion(criterion, structure)?;
        Some((p * (1.0 - p) / self.replicates_completed as f64).sqrt())
    }
}

/// Per-replicate record: the winner index per criterion and squared errors per candidate.
struct ReplicateRecord {
    winners: Vec<usize>,
    sq_errors: Vec<[f64; 3]>,
}

fn run_replicate(
    spec: &ScenarioSpec,
    replicate: usize,
    candidates: &[CorrStructure],
    criteria: &[Criterion],
    options: &HarnessOptions,
    solver: &LatentSolver,
) -> Result<ReplicateRecord> {
    let data = generate_dataset(spec, replicate, solver)?;
    let mut outcomes = Vec::with_capacity(candidates.len());
    let mut sq_errors = Vec::with_capacity(candidates.len());
    for &structure in candidates {
        let f = fit(&data, spec.family, structure, &options.fit)?;
        if !f.converged {
            return Err(GeeError::Scenario(format!("{structure} did not converge in replicate {replicate}")));
        }
        let values = evaluate(&f, false)?;
        sq_errors.push(std::array::from_fn(|j| (f.beta[j] - spec.beta[j]).powi(2)));
        outcomes.push(CandidateOutcome::from_values(structure, values));
    }
    let report = CriteriaReport::from_candidates(outcomes)?;
    let winners = criteria
        .iter()
        .map(|&c| {
            let s = report.winner(c).ok_or(GeeError::SelectionFailed)?;
            Ok(candidates.iter().position(|&x| x == s).expect("winner is a candidate"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicateRecord { winners, sq_errors })
}

/// Run every replicate of a scenario with the given candidates and criteria.
///
/// Replicates in which any candidate fails or does not converge are dropped
/// from the denominators and counted in `replicates_failed`.
pub fn run_scenario(
    spec: &ScenarioSpec,
    candidates: &[CorrStructure],
    criteria: &[Criterion],
    options: &HarnessOptions,
) -> Result<ScenarioResult> {
    spec.validate()?;
    if candidates.is_empty() || criteria.is_empty() {
        return Err(GeeError::Config("need at least one candidate and one criterion".into()));
    }
    spec.check_feasibility()?;
    let start = Instant::now();
    let solver = LatentSolver::new();
    let records = map_indexed(spec.replicates, options.execution, |r| {
        run_replicate(spec, r, candidates, criteria, options, &solver)
    });

    let mut wins = vec![vec![0u64; candidates.len()]; criteria.len()];
    let mut sq_error_sums = vec![vec![0.0; candidates.len()]; 3];
    let (mut completed, mut failed) = (0usize, 0usize);
    let mut first_error = None;
    for (r, rec) in records.into_iter().enumerate() {
        match rec {
            Ok(rec) => {
                completed += 1;
                for (c, &k) in rec.winners.iter().enumerate() {
                    wins[c][k] += 1;
                }
                for (k, errs) in rec.sq_errors.iter().enumerate() {
                    for j in 0..3 {
                        sq_error_sums[j][k] += errs[j];
                    }
                }
            }
            Err(e) => {
                debug!("{spec} replicate {r} failed: {e}");
                failed += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    if spec.replicates > 0 && completed == 0 {
        let cause = first_error.map(|e| e.to_string()).unwrap_or_default();
        return Err(GeeError::Scenario(format!("every replicate of {spec} failed; first error: {cause}")));
    }
    let degraded = spec.replicates > 0 && failed as f64 / spec.replicates as f64 > DEGRADED_FAILURE_RATE;
    if degraded {
        warn!("{spec}: {failed} of {} replicates failed", spec.replicates);
    }
    let wall_time = start.elapsed();
    info!("{spec}: {completed} replicates in {:.1}s", wall_time.as_secs_f64());
    Ok(ScenarioResult {
        spec: spec.clone(),
        candidates: candidates.to_vec(),
        criteria: criteria.to_vec(),
        wins,
        sq_error_sums,
        replicates_completed: completed,
        replicates_failed: failed,
        degraded,
        wall_time,
    })
}

/// [`run_scenario`] with candidates Indep, AR1 and Exch and all criteria.
pub fn run_reduced_candidates(spec: &ScenarioSpec, options: &HarnessOptions) -> Result<ScenarioResult> {
    run_scenario(spec, &REDUCED_CANDIDATES, &Criterion::ALL, options)
}
