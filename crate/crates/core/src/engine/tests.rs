use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::data::Cluster;
use crate::linalg::trace;

/// Binary clusters with a shared latent effect, intercept plus two covariates.
pub(crate) fn random_binary(n_clusters: usize, n_i: usize, seed: u64) -> LongitudinalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = (0..n_clusters)
        .map(|i| {
            let b: f64 = StandardNormal.sample(&mut rng);
            let mut x = DMatrix::zeros(n_i, 3);
            let mut y = DVector::zeros(n_i);
            for t in 0..n_i {
                let x1 = f64::from(rng.random_bool(0.5) as u8);
                let x2: f64 = StandardNormal.sample(&mut rng);
                x[(t, 0)] = 1.0;
                x[(t, 1)] = x1;
                x[(t, 2)] = x2;
                let eta = 0.3 + 0.5 * x1 - 0.4 * x2 + 0.8 * b;
                let prob = 1.0 / (1.0 + (-eta).exp());
                y[t] = f64::from(rng.random_bool(prob) as u8);
            }
            Cluster::new(format!("c{i}"), y, x, (1..=n_i).map(|t| t as f64).collect()).unwrap()
        })
        .collect();
    LongitudinalDataset::new(clusters, Family::Binary).unwrap()
}

fn random_linear(n: usize, seed: u64) -> LongitudinalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = (0..n)
        .map(|i| {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let y = 1.0 + 2.0 * x1 + e * (1.0 + x1.abs());
            Cluster::new(
                format!("o{i}"),
                DVector::from_vec(vec![y]),
                DMatrix::from_row_slice(1, 2, &[1.0, x1]),
                vec![0.0],
            )
            .unwrap()
        })
        .collect();
    LongitudinalDataset::new(clusters, Family::Gaussian).unwrap()
}

/// Gaussian elimination with partial pivoting on plain vectors.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = ((row + 1)..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Newton-Raphson on the Bernoulli log-likelihood, stacked observations.
fn logistic_mle(rows: &[(Vec<f64>, f64)]) -> Vec<f64> {
    let p = rows[0].0.len();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let mut hess = vec![vec![0.0; p]; p];
        let mut grad = vec![0.0; p];
        for (x, y) in rows {
            let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let pr = 1.0 / (1.0 + (-eta).exp());
            for j in 0..p {
                grad[j] += x[j] * (y - pr);
                for k in 0..p {
                    hess[j][k] += x[j] * x[k] * pr * (1.0 - pr);
                }
            }
        }
        let step = solve_dense(hess, grad);
        let mut big = 0.0f64;
        for j in 0..p {
            beta[j] += step[j];
            big = big.max(step[j].abs());
        }
        if big < 1e-14 {
            break;
        }
    }
    beta
}

fn stacked(ds: &LongitudinalDataset) -> Vec<(Vec<f64>, f64)> {
    let mut rows = Vec::new();
    for c in ds.clusters() {
        for t in 0..c.len() {
            rows.push((c.x.row(t).iter().copied().collect(), c.y[t]));
        }
    }
    rows
}

fn ols(rows: &[(Vec<f64>, f64)]) -> Vec<f64> {
    let p = rows[0].0.len();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (x, y) in rows {
        for j in 0..p {
            xty[j] += x[j] * y;
            for k in 0..p {
                xtx[j][k] += x[j] * x[k];
            }
        }
    }
    solve_dense(xtx, xty)
}

fn fixed_one() -> FitOptions {
    FitOptions::default().with_phi(PhiMode::FixedOne)
}

#[test]
fn independence_matches_logistic_mle() {
    let ds = random_binary(60, 4, 1);
    let fit = fit(&ds, Family::Binary, CorrStructure::Independence, &fixed_one()).unwrap();
    assert!(fit.converged);
    let oracle = logistic_mle(&stacked(&ds));
    for j in 0..3 {
        assert!((fit.beta[j] - oracle[j]).abs() < 1e-6, "{} vs {}", fit.beta[j], oracle[j]);
    }
}

#[test]
fn gaussian_singletons_reproduce_ols() {
    let ds = random_linear(40, 2);
    let fit = fit(&ds, Family::Gaussian, CorrStructure::Independence, &FitOptions::default()).unwrap();
    let oracle = ols(&stacked(&ds));
    for j in 0..2 {
        assert!((fit.beta[j] - oracle[j]).abs() < 1e-10);
    }
}

#[test]
fn convergence_postconditions_hold() {
    let ds = random_binary(80, 5, 3);
    for kind in CorrStructure::ALL {
        let f = fit(&ds, Family::Binary, kind, &FitOptions::default()).unwrap();
        assert!(f.converged, "{kind}");
        assert!(f.last_step <= 1e-8);
        assert!(f.ee_norm <= EE_TOLERANCE * (1.0 + f.beta.norm()));
        assert!(f.phi > 0.0);
    }
}

#[test]
fn model_cov_recomputes_from_caches() {
    let ds = random_binary(50, 4, 4);
    let f = fit(&ds, Family::Binary, CorrStructure::Exchangeable, &FitOptions::default()).unwrap();
    let mut m = DMatrix::zeros(3, 3);
    for c in &f.clusters {
        m += c.d.transpose() * &c.v_inv * &c.d;
    }
    let inv = m.try_inverse().unwrap();
    assert!((&inv - &f.model_cov).norm() / f.model_cov.norm() <= 1e-8);
    let s = sandwich(&f).unwrap();
    assert!((&s - &f.sandwich_cov).norm() / f.sandwich_cov.norm() <= 1e-8);
}

#[test]
fn sandwich_reduces_to_model_based_with_v_as_middle() {
    let ds = random_binary(30, 4, 5);
    for kind in CorrStructure::ALL {
        let f = fit(&ds, Family::Binary, kind, &FitOptions::default()).unwrap();
        let s = sandwich_with_middle(&f, |c| c.v.clone()).unwrap();
        assert_relative_eq!(s, f.model_cov, max_relative = 1e-8);
    }
}

#[test]
fn single_cluster_sandwich_algebra() {
    let ds = random_binary(1, 8, 6);
    let f = fit(&ds, Family::Binary, CorrStructure::Independence, &FitOptions::default()).unwrap();
    let c = &f.clusters[0];
    let u = c.d.transpose() * &c.v_inv * &c.resid;
    let expected = &f.model_cov * &u * u.transpose() * &f.model_cov;
    assert!((&f.sandwich_cov - &expected).abs().max() < 1e-8 * expected.abs().max().max(1e-300));
    assert!(f.sandwich_cov.rank(1e-10 * f.sandwich_cov.norm()) <= 1);
}

#[test]
fn gaussian_sandwich_matches_white_estimator() {
    let ds = random_linear(50, 7);
    let f = fit(&ds, Family::Gaussian, CorrStructure::Independence, &FitOptions::default()).unwrap();
    let rows = stacked(&ds);
    let beta = ols(&rows);
    let mut xtx = DMatrix::<f64>::zeros(2, 2);
    let mut meat = DMatrix::<f64>::zeros(2, 2);
    for (x, y) in &rows {
        let xv = DVector::from_vec(x.clone());
        let e = y - (x[0] * beta[0] + x[1] * beta[1]);
        xtx += &xv * xv.transpose();
        meat += &xv * xv.transpose() * (e * e);
    }
    let inv = xtx.try_inverse().unwrap();
    let white = &inv * meat * &inv;
    assert_relative_eq!(f.sandwich_cov, white, max_relative = 1e-8);
}

#[test]
fn leverage_trace_sums_to_p() {
    let ds = random_binary(70, 5, 8);
    for kind in CorrStructure::ALL {
        let f = fit(&ds, Family::Binary, kind, &FitOptions::default()).unwrap();
        let total: f64 = (0..f.n_clusters()).map(|i| trace(&leverage(&f, i).unwrap())).sum();
        assert!((total - 3.0).abs() < 1e-8, "{kind}: {total}");
    }
}

#[test]
fn linear_leverage_is_hat_value() {
    let ds = random_linear(15, 9);
    let f = fit(&ds, Family::Gaussian, CorrStructure::Independence, &FitOptions::default().with_phi(PhiMode::FixedOne))
        .unwrap();
    let mut xtx = DMatrix::<f64>::zeros(2, 2);
    for c in ds.clusters() {
        xtx += c.x.transpose() * &c.x;
    }
    let inv = xtx.try_inverse().unwrap();
    for (i, c) in ds.clusters().iter().enumerate() {
        let h = (&c.x * &inv * c.x.transpose())[(0, 0)];
        assert!((leverage(&f, i).unwrap()[(0, 0)] - h).abs() < 1e-12);
    }
    assert!(matches!(leverage(&f, 99), Err(GeeError::IndexOutOfRange { .. })));
}

#[test]
fn saturated_cluster_has_identity_leverage() {
    // one cluster with n_1 = p and a full-rank D: M is built from that cluster alone
    let x = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.5, 1.0, 1.0, -0.3, 1.0, 2.0, 0.8]);
    let beta = DVector::from_vec(vec![0.2, -0.1, 0.3]);
    let mr = crate::family::mean_response(Family::Binary, &x, &beta);
    let r = DMatrix::from_fn(3, 3, |i, j| 0.4f64.powi((i as i32 - j as i32).abs()));
    let v = working_covariance(&r, &mr.variance, 1.0);
    let v_inv = v.clone().try_inverse().unwrap();
    let m_inv = (mr.d.transpose() * &v_inv * &mr.d).try_inverse().unwrap();
    let h = cluster_leverage(&mr.d, &m_inv, &v_inv);
    assert!((h - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-10);
}

#[test]
fn zero_residual_cluster_has_zero_dbeta() {
    let ds = random_linear(20, 10);
    let f = fit(&ds, Family::Gaussian, CorrStructure::Independence, &fixed_one()).unwrap();
    // place cluster 3 on the line fitted without it, so its full-data residual is zero
    let without = exact_deletion(&ds, Family::Gaussian, CorrStructure::Independence, &fixed_one(), &f, 3).unwrap();
    let mut clusters = ds.clusters().to_vec();
    clusters[3].y[0] = (&clusters[3].x * &without.beta)[0];
    let ds2 = LongitudinalDataset::new(clusters, Family::Gaussian).unwrap();
    let f2 = fit(&ds2, Family::Gaussian, CorrStructure::Independence, &fixed_one()).unwrap();
    assert!(f2.clusters[3].resid[0].abs() < 1e-10);
    let c = one_step_deletion(&f2, 3).unwrap();
    assert!(c.abs().max() < 1e-10);
}

#[test]
fn linear_one_step_equals_classical_dbeta() {
    let ds = random_linear(25, 11);
    let f = fit(&ds, Family::Gaussian, CorrStructure::Independence, &fixed_one()).unwrap();
    let mut xtx = DMatrix::<f64>::zeros(2, 2);
    for c in ds.clusters() {
        xtx += c.x.transpose() * &c.x;
    }
    let inv = xtx.try_inverse().unwrap();
    for (i, c) in ds.clusters().iter().enumerate() {
        let xi = c.x.row(0).transpose();
        let h = (xi.transpose() * &inv * &xi)[(0, 0)];
        let e = c.y[0] - xi.dot(&f.beta);
        let dbeta = &inv * &xi * (e / (1.0 - h));
        let ours = one_step_deletion(&f, i).unwrap();
        assert!((ours - &dbeta).abs().max() < 1e-10);
        // for linear regression the one-step value is exact
        let refit = exact_deletion(&ds, Family::Gaussian, CorrStructure::Independence, &fixed_one(), &f, i).unwrap();
        assert!((&f.beta - &refit.beta - &dbeta).abs().max() < 1e-8);
    }
}

#[test]
fn deleting_one_of_two_identical_clusters() {
    let ds = random_binary(1, 16, 12);
    let c = ds.clusters()[0].clone();
    let mut c2 = c.clone();
    c2.id = "twin".into();
    let ds = LongitudinalDataset::new(vec![c, c2], Family::Binary).unwrap();
    let f = fit(&ds, Family::Binary, CorrStructure::Independence, &FitOptions::default()).unwrap();
    assert!(f.converged);
    for i in 0..2 {
        let d = exact_deletion(&ds, Family::Binary, CorrStructure::Independence, &FitOptions::default(), &f, i).unwrap();
        assert!((&d.beta - &f.beta).abs().max() < 1e-7);
    }
}

#[test]
fn permutation_invariance() {
    let ds = random_binary(40, 4, 13);
    let mut order: Vec<usize> = (0..40).collect();
    order.reverse();
    order.swap(3, 17);
    let perm = ds.permuted(&order).unwrap();
    for kind in CorrStructure::ALL {
        let a = fit(&ds, Family::Binary, kind, &FitOptions::default()).unwrap();
        let b = fit(&perm, Family::Binary, kind, &FitOptions::default()).unwrap();
        assert!((&a.beta - &b.beta).abs().max() < 1e-8, "{kind}");
    }
}

#[test]
fn moments_are_a_fixed_point_at_convergence() {
    let ds = random_binary(60, 5, 14);
    for kind in [CorrStructure::Ar1, CorrStructure::Exchangeable, CorrStructure::Unstructured] {
        let f = fit(&ds, Family::Binary, kind, &FitOptions::default()).unwrap();
        let pearson: Vec<DVector<f64>> = f.clusters.iter().map(|c| c.pearson.clone()).collect();
        let phi = estimate_phi(&pearson, f.total_obs, 3);
        assert!((phi - f.phi).abs() < 1e-6);
        let sets: Vec<ResidualSet<'_>> = pearson
            .iter()
            .zip(&f.clusters)
            .map(|(r, c)| ResidualSet { residuals: r, waves: &c.waves })
            .collect();
        let est = estimate_alpha(kind, &sets, phi, 3, ds.wave_grid()).unwrap();
        match (&est.correlation, &f.correlation) {
            (WorkingCorrelation::Unstructured { alpha: a, .. }, WorkingCorrelation::Unstructured { alpha: b, .. }) => {
                assert!((a - b).abs().max() < 1e-6)
            }
            (a, b) => assert!((a.scalar_alpha().unwrap() - b.scalar_alpha().unwrap()).abs() < 1e-6),
        }
    }
}

#[test]
fn max_iter_exhaustion_is_reported_not_raised() {
    let ds = random_binary(30, 4, 15);
    let opts = FitOptions { max_iter: 1, ..FitOptions::default() };
    let f = fit(&ds, Family::Binary, CorrStructure::Exchangeable, &opts).unwrap();
    assert!(!f.converged);
    assert_eq!(f.iterations, 1);
}

#[test]
fn collinear_design_is_rank_deficient() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let clusters = (0..10)
        .map(|i| {
            let v: f64 = rng.random();
            Cluster::new(
                format!("{i}"),
                DVector::from_vec(vec![v, v + 1.0]),
                DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]),
                vec![0.0, 1.0],
            )
            .unwrap()
        })
        .collect();
    let ds = LongitudinalDataset::new(clusters, Family::Gaussian).unwrap();
    assert!(matches!(
        fit(&ds, Family::Gaussian, CorrStructure::Independence, &FitOptions::default()),
        Err(GeeError::RankDeficient { .. })
    ));
}
