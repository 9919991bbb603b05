//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use geepress::criteria::{self, Criterion};
use geepress::engine::{exact_deletion, one_step_deletion, sandwich_with_middle};
use geepress::harness::{
    cell_seed, run_reduced_candidates, run_scenario, table_cells, HarnessOptions, ScenarioResult, TableId,
};
use geepress::par::{map_indexed, Execution};
use geepress::simgen::{all_scenarios, generate_cluster, generate_dataset, LatentSolver, ScenarioSpec};
use geepress::{fit, CorrStructure, Family, FitOptions, GeeFit, LongitudinalDataset, PhiMode};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{linear_dataset, logistic_dataset, logistic_mle, loo_press, median, ols, quasi_likelihood, rows};

/// Global seed of the Monte Carlo criteria; per-cell seeds derive from it.
const SEED: u64 = 1;

const STRUCTURES: [CorrStructure; 4] = [
    CorrStructure::Independence,
    CorrStructure::Ar1,
    CorrStructure::Exchangeable,
    CorrStructure::Unstructured,
];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within_time(v: Verdict, elapsed: Duration, limit: Duration) -> Verdict {
    if elapsed > limit {
        verdict(false, format!("{}; runtime {:.1?} exceeds {:.0?}", v.detail, elapsed, limit))
    } else {
        v
    }
}

fn fixed_one() -> FitOptions {
    FitOptions::default().with_phi(PhiMode::FixedOne)
}

fn harness_seeded(spec: &ScenarioSpec, table: u8, reps: usize) -> ScenarioSpec {
    let table = TableId::new(table).unwrap();
    spec.clone().with_replicates(reps).with_seed(cell_seed(SEED, spec, table))
}

fn cell(descriptor: &str) -> ScenarioSpec {
    descriptor.parse().unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Verdict {
    let mut worst_logit: f64 = 0.0;
    for seed in 0..5 {
        let ds = logistic_dataset(200, 4, 100 + seed);
        let f = fit(&ds, Family::Binary, CorrStructure::Independence, &FitOptions { tol: 1e-12, ..fixed_one() }).unwrap();
        worst_logit = worst_logit.max(max_abs_diff(f.beta.as_slice(), &logistic_mle(&rows(&ds, None))));
    }
    let mut worst_ols: f64 = 0.0;
    for seed in 0..5 {
        let ds = linear_dataset(150, 1, 200 + seed);
        let f = fit(&ds, Family::Gaussian, CorrStructure::Independence, &FitOptions::default()).unwrap();
        worst_ols = worst_ols.max(max_abs_diff(f.beta.as_slice(), &ols(&rows(&ds, None))));
    }
    verdict(
        worst_logit < 1e-6 && worst_ols < 1e-10,
        format!("logistic IRLS max|dbeta| = {worst_logit:.2e} (< 1e-6), OLS max|dbeta| = {worst_ols:.2e} (< 1e-10)"),
    )
}

fn criterion_2() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut cases = Vec::new();
    for (n, n_i) in [(6, 1), (20, 1), (6, 3), (20, 3)] {
        let ds = linear_dataset(n, n_i, 300 + n as u64 + n_i as u64);
        let f = fit(&ds, Family::Gaussian, CorrStructure::Independence, &fixed_one()).unwrap();
        let gpc = criteria::gpc(&f).unwrap();
        let press = loo_press(&ds);
        let rel = (gpc - press).abs() / press;
        worst = worst.max(rel);
        cases.push(format!("N={n},n_i={n_i}"));
    }
    verdict(worst < 1e-10, format!("GPC vs leave-one-out PRESS on {}: max rel err {worst:.2e} (< 1e-10)", cases.join(", ")))
}

fn identity_fits() -> Vec<(String, LongitudinalDataset, GeeFit, bool)> {
    let mut out = Vec::new();
    let solver = LatentSolver::new();
    for (desc, family) in [
        ("binary:balanced:ar1:0.4:100", Family::Binary),
        ("binary:unbalanced:un:0.2:100", Family::Binary),
        ("poisson:balanced:exch:0.4:100", Family::Poisson),
        ("poisson:unbalanced:ar1:0.2:100", Family::Poisson),
    ] {
        let ds = generate_dataset(&cell(desc).with_seed(77), 0, &solver).unwrap();
        for s in STRUCTURES {
            for (phi_fixed, opts) in [(true, fixed_one()), (false, FitOptions::default())] {
                let f = fit(&ds, family, s, &opts).unwrap();
                if f.converged {
                    out.push((format!("{desc}/{s}"), ds.clone(), f, phi_fixed));
                }
            }
        }
    }
    for s in STRUCTURES {
        let ds = linear_dataset(60, 4, 400);
        let f = fit(&ds, Family::Gaussian, s, &FitOptions::default()).unwrap();
        if f.converged {
            out.push((format!("gaussian/{s}"), ds, f, false));
        }
    }
    out
}

fn criterion_3() -> Verdict {
    let fits = identity_fits();
    let (mut qic_err, mut dbar_err, mut sand_err, mut trace_err, mut ql_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (_, ds, f, phi_fixed) in &fits {
        let qic = criteria::qic(f).unwrap();
        let cic = criteria::cic(f).unwrap();
        let ql = if *phi_fixed {
            let oracle: f64 = f
                .clusters
                .iter()
                .map(|c| quasi_likelihood(ds.family(), c.y.as_slice(), c.mu.as_slice()))
                .sum();
            ql_err = ql_err.max((oracle - f.ql).abs() / oracle.abs().max(1.0));
            oracle
        } else {
            f.ql
        };
        qic_err = qic_err.max((qic - (-2.0 * ql + 2.0 * cic)).abs() / qic.abs().max(1.0));
        let (rj1, rj2, dbar) = criteria::rj(f).unwrap();
        dbar_err = dbar_err.max((dbar - (rj2 - 2.0 * rj1 + 1.0)).abs());
        let s = sandwich_with_middle(f, |c| c.v.clone()).unwrap();
        let m_inv = f.information.clone().try_inverse().unwrap();
        sand_err = sand_err.max((&s - &m_inv).abs().max() / m_inv.abs().max());
        let tr: f64 = f.clusters.iter().map(|c| c.leverage.trace()).sum();
        trace_err = trace_err.max((tr - f.p() as f64).abs());
    }
    let pass = qic_err < 1e-8 && ql_err < 1e-8 && dbar_err < 1e-10 && sand_err < 1e-8 && trace_err < 1e-8;
    verdict(
        pass,
        format!(
            "{} fits: QIC {qic_err:.1e}, QL {ql_err:.1e} (< 1e-8); DBAR {dbar_err:.1e} (< 1e-10); sandwich->M^-1 {sand_err:.1e} (< 1e-8); sum tr(H)-p {trace_err:.1e} (< 1e-8)",
            fits.len()
        ),
    )
}

/// Median one-step relative error and median relative GPC gap for one sample size.
fn deletion_accuracy(n: usize, datasets: usize) -> (f64, f64) {
    let solver = LatentSolver::new();
    let spec = cell("binary:balanced:exch:0.4:50");
    let spec = ScenarioSpec { n_subjects: n, ..spec }.with_seed(500 + n as u64);
    let opts = fixed_one();
    let per_dataset = map_indexed(datasets, Execution::Parallel, |r| {
        let ds = generate_dataset(&spec, r, &solver).unwrap();
        let full = fit(&ds, Family::Binary, CorrStructure::Exchangeable, &opts).unwrap();
        assert!(full.converged, "N={n} dataset {r} did not converge");
        let mut errors = Vec::with_capacity(n);
        let mut exact_press = 0.0;
        for i in 0..n {
            let deleted = exact_deletion(&ds, Family::Binary, CorrStructure::Exchangeable, &opts, &full, i).unwrap();
            let delta = &full.beta - &deleted.beta;
            let approx = one_step_deletion(&full, i).unwrap();
            errors.push((&approx - &delta).norm() / delta.norm());
            let c = &full.clusters[i];
            let eta = ds.clusters()[i].x.clone() * &deleted.beta;
            let e = c.y.map_with_location(|t, _, y| y - Family::Binary.inverse_link(eta[t]));
            exact_press += (e.transpose() * &c.v_inv * &e)[(0, 0)];
        }
        let gpc = criteria::gpc(&full).unwrap();
        (errors, (gpc - exact_press).abs() / exact_press)
    });
    let all_errors: Vec<f64> = per_dataset.iter().flat_map(|(e, _)| e.iter().copied()).collect();
    let gaps: Vec<f64> = per_dataset.iter().map(|(_, g)| *g).collect();
    (median(all_errors), median(gaps))
}

fn criterion_4() -> Verdict {
    let ns = [25, 100, 400];
    let results: Vec<(f64, f64)> = ns.iter().map(|&n| deletion_accuracy(n, 50)).collect();
    let dec = |k: usize| results.windows(2).all(|w| if k == 0 { w[1].0 < w[0].0 } else { w[1].1 < w[0].1 });
    let fmt = |k: usize| {
        ns.iter()
            .zip(&results)
            .map(|(n, r)| format!("{n}:{:.2e}", if k == 0 { r.0 } else { r.1 }))
            .collect::<Vec<_>>()
            .join(" ")
    };
    verdict(
        dec(0) && dec(1),
        format!("median rel err C_i vs exact [{}]; median rel GPC gap [{}]; both must decrease", fmt(0), fmt(1)),
    )
}

fn check(label: &str, value: f64, target: f64, tol: f64) -> (bool, String) {
    let ok = (value - target).abs() <= tol;
    (ok, format!("{label} {value:.3} (target {target} +/- {tol})"))
}

fn failures(r: &ScenarioResult) -> String {
    format!("{}/{} replicates dropped", r.replicates_failed, r.replicates_failed + r.replicates_completed)
}

fn criteria_5_and_8() -> (Verdict, Verdict) {
    let spec = harness_seeded(&cell("binary:balanced:ar1:0.2:50"), 1, 1000);
    let r = run_scenario(&spec, &STRUCTURES, &Criterion::ALL, &HarnessOptions::default()).unwrap();
    let (ok_gpc, gpc) = check("GPC->AR1", r.proportion(Criterion::Gpc, CorrStructure::Ar1).unwrap(), 0.364, 0.05);
    let (ok_cic, cic) = check("CIC->UN", r.proportion(Criterion::Cic, CorrStructure::Unstructured).unwrap(), 0.859, 0.05);
    let (ok_mse, mse) = check("beta1 MSE (working AR1)", r.mse(1, CorrStructure::Ar1).unwrap(), 0.148, 0.03);
    (
        verdict(ok_gpc && ok_cic, format!("{gpc}; {cic}; {}", failures(&r))),
        verdict(ok_mse, format!("{mse}; {}", failures(&r))),
    )
}

fn criterion_6() -> Verdict {
    let spec = harness_seeded(&cell("poisson:balanced:exch:0.2:50"), 5, 1000);
    let r = run_scenario(&spec, &STRUCTURES, &Criterion::ALL, &HarnessOptions::default()).unwrap();
    let (ok, msg) = check("GPC->Exch", r.proportion(Criterion::Gpc, CorrStructure::Exchangeable).unwrap(), 0.610, 0.05);
    verdict(ok, format!("{msg}; {}", failures(&r)))
}

fn criterion_7() -> Verdict {
    let spec = harness_seeded(&cell("binary:balanced:exch:0.2:50"), 9, 1000);
    let r = run_reduced_candidates(&spec, &HarnessOptions::default()).unwrap();
    let (ok, msg) = check("DBAR->Exch", r.proportion(Criterion::Dbar, CorrStructure::Exchangeable).unwrap(), 0.951, 0.03);
    verdict(ok, format!("{msg}; {}", failures(&r)))
}

/// Wave-wise means and pairwise correlations of `clusters` draws with fixed means.
fn empirical_moments(family: Family, means: &[f64], target: &DMatrix<f64>, clusters: usize, seed: u64) -> (Vec<f64>, DMatrix<f64>) {
    let solver = LatentSolver::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = means.len();
    let mut sum = vec![0.0; t];
    let mut cross = DMatrix::<f64>::zeros(t, t);
    for _ in 0..clusters {
        let y = generate_cluster(family, means, target, &solver, &mut rng).unwrap();
        for a in 0..t {
            sum[a] += y[a];
            for b in 0..t {
                cross[(a, b)] += y[a] * y[b];
            }
        }
    }
    let n = clusters as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let cov = DMatrix::from_fn(t, t, |a, b| cross[(a, b)] / n - mean[a] * mean[b]);
    let corr = DMatrix::from_fn(t, t, |a, b| cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt());
    (mean, corr)
}

fn criterion_9() -> Verdict {
    let mut infeasible = Vec::new();
    for spec in all_scenarios() {
        if let Err(e) = spec.check_feasibility() {
            infeasible.push(format!("{spec}: {e}"));
        }
    }
    // Every mean pair the design produces: x1 per subject, x2 varying over the five occasions.
    let x2 = [0.0, 1.0, 0.0, 1.0, 1.0];
    let waves: Vec<f64> = (1..=5).map(f64::from).collect();
    let mut jobs = Vec::new();
    for spec in all_scenarios().into_iter().filter(|s| s.n_subjects == 50 && s.balance.name() == "balanced") {
        for x1 in [0.0, 1.0] {
            jobs.push((spec.clone(), x1));
        }
    }
    let clusters = 100_000;
    let results = map_indexed(jobs.len(), Execution::Parallel, |k| {
        let (spec, x1) = &jobs[k];
        let means: Vec<f64> = x2
            .iter()
            .map(|x| spec.family.inverse_link(spec.beta[0] + spec.beta[1] * x1 + spec.beta[2] * x))
            .collect();
        let target = spec.target_matrix(&waves);
        let (mean, corr) = empirical_moments(spec.family, &means, &target, clusters, 900 + k as u64);
        let mut worst_corr: f64 = 0.0;
        for a in 0..5 {
            for b in a + 1..5 {
                worst_corr = worst_corr.max((corr[(a, b)] - target[(a, b)]).abs());
            }
        }
        let mean_ok = means.iter().zip(&mean).all(|(m, e)| match spec.family {
            Family::Poisson => (e - m).abs() <= 0.02 * m,
            _ => (e - m).abs() <= 0.005,
        });
        let worst_mean = means.iter().zip(&mean).map(|(m, e)| (e - m).abs()).fold(0.0, f64::max);
        (worst_corr, mean_ok, worst_mean)
    });
    let worst_corr = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let means_ok = results.iter().all(|r| r.1);
    let worst_mean = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let pass = infeasible.is_empty() && worst_corr <= 0.02 && means_ok;
    verdict(
        pass,
        format!(
            "{} margin configurations x {clusters} clusters: max |corr - target| {worst_corr:.4} (<= 0.02), max |mean - mu| {worst_mean:.4} (binary <= 0.005, poisson <= 0.02 mu) {}; {} infeasible design cells{}",
            jobs.len(),
            if means_ok { "ok" } else { "VIOLATED" },
            infeasible.len(),
            if infeasible.is_empty() { String::new() } else { format!(": {}", infeasible.join("; ")) }
        ),
    )
}

fn criterion_10() -> Verdict {
    let reps = 300;
    let mut worst = f64::INFINITY;
    let mut worst_cell = String::new();
    let mut violations = Vec::new();
    let mut degraded = 0;
    let mut cells = 0;
    for table in (1..=8).map(|t| TableId::new(t).unwrap()) {
        for spec in table_cells(table) {
            let spec = spec.clone().with_replicates(reps).with_seed(cell_seed(SEED, &spec, table));
            let r = run_scenario(&spec, &STRUCTURES, &[Criterion::Gpc, Criterion::Sc], &HarnessOptions::default()).unwrap();
            cells += 1;
            degraded += usize::from(r.degraded);
            let gpc = r.correct_selection(Criterion::Gpc).unwrap();
            let sc = r.correct_selection(Criterion::Sc).unwrap();
            let margin = gpc - sc;
            if margin < worst {
                worst = margin;
                worst_cell = format!("table {} {spec}", table.number());
            }
            if margin < -0.02 {
                violations.push(format!("table {} {spec}: GPC {gpc:.3} SC {sc:.3}", table.number()));
            }
        }
    }
    verdict(
        violations.is_empty() && cells == 48,
        format!(
            "{cells} cells x {reps} reps: min (GPC - SC) correct selection {worst:+.3} at {worst_cell} (slack 0.02); {degraded} degraded cells{}",
            if violations.is_empty() { String::new() } else { format!("; violations: {}", violations.join("; ")) }
        ),
    )
}

fn report(id: u8, title: &str, v: &Verdict, elapsed: Duration) {
    println!(
        "{} [{id:>2}] {title}: {} ({:.1?})",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed
    );
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and filtered runs of other targets pass through here.
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let minute = Duration::from_secs(60);
    let mut all_pass = true;
    let mut record = |id: u8, title: &str, v: Verdict, elapsed: Duration| {
        all_pass &= v.pass;
        report(id, title, &v, elapsed);
    };

    let t = Instant::now();
    let v = criterion_1();
    let e = t.elapsed();
    record(1, "oracle equivalence", within_time(v, e, Duration::from_secs(1)), e);

    let t = Instant::now();
    record(2, "GPC reduces to PRESS", criterion_2(), t.elapsed());

    let t = Instant::now();
    record(3, "algebraic identities", criterion_3(), t.elapsed());

    let t = Instant::now();
    let v = criterion_4();
    let e = t.elapsed();
    record(4, "one-step deletion accuracy", within_time(v, e, 5 * minute), e);

    let t = Instant::now();
    let (v5, v8) = criteria_5_and_8();
    let e = t.elapsed();
    record(5, "table 1 cell", within_time(v5, e, 10 * minute), e);

    let t = Instant::now();
    let v = criterion_6();
    let e6 = t.elapsed();
    record(6, "table 5 cell", within_time(v, e6, 10 * minute), e6);

    let t = Instant::now();
    let v = criterion_7();
    let e7 = t.elapsed();
    record(7, "table 9 cell", within_time(v, e7, 10 * minute), e7);

    record(8, "table B1 MSE", v8, e);

    let t = Instant::now();
    record(9, "generator fidelity", criterion_9(), t.elapsed());

    let t = Instant::now();
    let v = criterion_10();
    let e = t.elapsed();
    record(10, "GPC at least as good as SC", within_time(v, e, 120 * minute), e);

    if all_pass {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria failed");
        ExitCode::FAILURE
    }
}
