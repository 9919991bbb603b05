//! Longitudinal data containers.

use nalgebra::{DMatrix, DVector};

use crate::error::{GeeError, Result};
use crate::family::Family;

/// Ordered distinct wave times observed anywhere in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveGrid(Vec<f64>);

impl WaveGrid {
    pub fn new(mut times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(GeeError::InvalidData(
                "wave times must be finite and non-negative".into(),
            ));
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        Ok(WaveGrid(times))
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.0.binary_search_by(|probe| probe.total_cmp(&t)).ok()
    }
}

/// One subject: responses, covariates and the wave times they were observed at.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub waves: Vec<f64>,
}

impl Cluster {
    pub fn new(id: impl Into<String>, y: DVector<f64>, x: DMatrix<f64>, waves: Vec<f64>) -> Result<Self> {
        let id = id.into();
        let n = y.len();
        if n == 0 {
            return Err(GeeError::InvalidData(format!("cluster {id} has no observations")));
        }
        if x.nrows() != n || waves.len() != n {
            return Err(GeeError::InvalidData(format!(
                "cluster {id}: {n} responses but {} covariate rows and {} wave times",
                x.nrows(),
                waves.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GeeError::InvalidData(format!("cluster {id} has non-finite covariates")));
        }
        if waves.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GeeError::InvalidData(format!(
                "cluster {id}: wave times must be strictly increasing"
            )));
        }
        Ok(Cluster { id, y, x, waves })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    clusters: Vec<Cluster>,
    p: usize,
    wave_grid: WaveGrid,
    family: Family,
    covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    pub fn new(clusters: Vec<Cluster>, family: Family) -> Result<Self> {
        let p = clusters.first().map(|c| c.x.ncols()).unwrap_or(0);
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Self::with_names(clusters, family, names)
    }

    pub fn with_names(clusters: Vec<Cluster>, family: Family, covariate_names: Vec<String>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(GeeError::InvalidData("dataset has no clusters".into()));
        }
        let p = clusters[0].x.ncols();
        if p == 0 {
            return Err(GeeError::InvalidData("dataset has no covariates".into()));
        }
        if covariate_names.len() != p {
            return Err(GeeError::InvalidData(format!(
                "{} covariate names for {p} columns",
                covariate_names.len()
            )));
        }
        let mut total = 0;
        for c in &clusters {
            if c.x.ncols() != p {
                return Err(GeeError::InvalidData(format!(
                    "cluster {} has {} covariates, expected {p}",
                    c.id,
                    c.x.ncols()
                )));
            }
            if let Some(bad) = c.y.iter().find(|&&y| !family.validate_response(y)) {
                return Err(GeeError::InvalidData(format!(
                    "cluster {}: response {bad} invalid for {family} family",
                    c.id
                )));
            }
            total += c.len();
        }
        if total <= p {
            return Err(GeeError::InvalidData(format!(
                "{total} observations do not exceed {p} covariates"
            )));
        }
        let wave_grid = WaveGrid::new(clusters.iter().flat_map(|c| c.waves.iter().copied()).collect())?;
        Ok(LongitudinalDataset {
            clusters,
            p,
            wave_grid,
            family,
            covariate_names,
        })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn total_obs(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    pub fn wave_grid(&self) -> &WaveGrid {
        &self.wave_grid
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Copy of the dataset without cluster `index`.
    pub fn without_cluster(&self, index: usize) -> Result<Self> {
        if index >= self.clusters.len() {
            return Err(GeeError::IndexOutOfRange {
                index,
                count: self.clusters.len(),
            });
        }
        let clusters = self
            .clusters
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != index)
            .map(|(_, c)| c.clone())
            .collect();
        Self::with_names(clusters, self.family, self.covariate_names.clone())
    }

    /// Same data with clusters in a different order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let clusters = order.iter().map(|&i| self.clusters[i].clone()).collect();
        Self::with_names(clusters, self.family, self.covariate_names.clone())
    }

    /// Replace the covariate matrices (same row counts), e.g. for reparameterized fits.
    pub fn with_design(&self, transform: &DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let clusters = self
            .clusters
            .iter()
            .map(|c| Cluster {
                id: c.id.clone(),
                y: c.y.clone(),
                x: &c.x * transform,
                waves: c.waves.clone(),
            })
            .collect();
        Self::with_names(clusters, self.family, names)
    }
}
