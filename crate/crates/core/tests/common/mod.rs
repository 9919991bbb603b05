//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use geepress::{Cluster, Family, LongitudinalDataset};
use nalgebra::{DMatrix, DVector};

/// Gaussian elimination with partial pivoting on plain vectors.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

/// Stacked `(y, x)` rows of a dataset, optionally skipping one cluster.
pub fn rows(ds: &LongitudinalDataset, skip: Option<usize>) -> Vec<(f64, Vec<f64>)> {
    let mut out = Vec::new();
    for (i, c) in ds.clusters().iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        for t in 0..c.len() {
            out.push((c.y[t], (0..ds.p()).map(|j| c.x[(t, j)]).collect()));
        }
    }
    out
}

pub fn ols(rows: &[(f64, Vec<f64>)]) -> Vec<f64> {
    let p = rows[0].1.len();
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for (y, x) in rows {
        for j in 0..p {
            b[j] += x[j] * y;
            for k in 0..p {
                a[j][k] += x[j] * x[k];
            }
        }
    }
    solve(a, b)
}

/// Logistic maximum likelihood by Newton-Raphson.
pub fn logistic_mle(rows: &[(f64, Vec<f64>)]) -> Vec<f64> {
    let p = rows[0].1.len();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let mut info = vec![vec![0.0; p]; p];
        let mut score = vec![0.0; p];
        for (y, x) in rows {
            let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            for j in 0..p {
                score[j] += x[j] * (y - mu);
                for k in 0..p {
                    info[j][k] += x[j] * x[k] * mu * (1.0 - mu);
                }
            }
        }
        let step = solve(info, score);
        beta.iter_mut().zip(&step).for_each(|(b, s)| *b += s);
        if step.iter().all(|s| s.abs() < 1e-14) {
            break;
        }
    }
    beta
}

/// Brute-force leave-one-cluster-out PRESS for least squares.
pub fn loo_press(ds: &LongitudinalDataset) -> f64 {
    let mut press = 0.0;
    for (i, c) in ds.clusters().iter().enumerate() {
        let beta = ols(&rows(ds, Some(i)));
        for t in 0..c.len() {
            let pred: f64 = (0..ds.p()).map(|j| c.x[(t, j)] * beta[j]).sum();
            press += (c.y[t] - pred).powi(2);
        }
    }
    press
}

/// Deterministic pseudo-random stream (splitmix64), independent of the library's generators.
pub struct Stream(u64);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Gaussian clusters `y = 1 + 0.5 x1 - 0.8 x2 + noise` with a shared cluster effect.
pub fn linear_dataset(n_clusters: usize, n_i: usize, seed: u64) -> LongitudinalDataset {
    let mut s = Stream::new(seed);
    let clusters = (0..n_clusters)
        .map(|i| {
            let u = 0.7 * s.normal();
            let x = DMatrix::from_fn(n_i, 3, |_, j| if j == 0 { 1.0 } else { s.normal() });
            let y = DVector::from_fn(n_i, |t, _| 1.0 + 0.5 * x[(t, 1)] - 0.8 * x[(t, 2)] + u + s.normal());
            Cluster::new(format!("c{i}"), y, x, (0..n_i).map(|t| t as f64).collect()).unwrap()
        })
        .collect();
    LongitudinalDataset::new(clusters, Family::Gaussian).unwrap()
}

/// Independent binary clusters from a logistic model with per-observation covariates.
pub fn logistic_dataset(n_clusters: usize, n_i: usize, seed: u64) -> LongitudinalDataset {
    let mut s = Stream::new(seed);
    let clusters = (0..n_clusters)
        .map(|i| {
            let x = DMatrix::from_fn(n_i, 3, |_, j| if j == 0 { 1.0 } else { s.normal() });
            let y = DVector::from_fn(n_i, |t, _| {
                let eta = -0.3 + 0.8 * x[(t, 1)] - 0.5 * x[(t, 2)];
                f64::from(u8::from(s.uniform() < 1.0 / (1.0 + (-eta).exp())))
            });
            Cluster::new(format!("c{i}"), y, x, (0..n_i).map(|t| t as f64).collect()).unwrap()
        })
        .collect();
    LongitudinalDataset::new(clusters, Family::Binary).unwrap()
}

/// Quasi-likelihood `sum q(y, mu)` with unit scale, written out per family.
pub fn quasi_likelihood(family: Family, y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&y, &m)| match family {
            Family::Binary => y * m.ln() + (1.0 - y) * (1.0 - m).ln(),
            Family::Poisson => {
                if y > 0.0 {
                    y * m.ln() - m
                } else {
                    -m
                }
            }
            Family::Gaussian => -0.5 * (y - m).powi(2),
        })
        .sum()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
