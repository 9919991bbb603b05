//! Long-format CSV: one row per observation with columns `id, time, y, x1..xp`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::{Cluster, LongitudinalDataset};
use crate::error::{GeeError, Result};
use crate::family::Family;

pub const INTERCEPT: &str = "intercept";

fn row_error(line: u64, msg: impl std::fmt::Display) -> GeeError {
    GeeError::InvalidData(format!("row {line}: {msg}"))
}

/// Read a long-format table. Rows must be grouped by `id` with strictly
/// increasing `time` inside each group. With `intercept`, a column of ones
/// named `intercept` is prepended to the covariates.
pub fn read_long_csv<R: Read>(reader: R, family: Family, intercept: bool) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 3 || names[0] != "id" || names[1] != "time" || names[2] != "y" {
        return Err(GeeError::InvalidData(format!(
            "header must start with id,time,y; got {}",
            names.join(",")
        )));
    }
    let mut covariates: Vec<String> = names[3..].iter().map(|s| s.to_string()).collect();
    if intercept {
        if covariates.iter().any(|c| c == INTERCEPT) {
            return Err(GeeError::InvalidData("column 'intercept' present; use --no-intercept".into()));
        }
        covariates.insert(0, INTERCEPT.to_string());
    }
    let p = covariates.len();
    if p == 0 {
        return Err(GeeError::InvalidData("no covariates and no intercept".into()));
    }

    struct Group {
        id: String,
        times: Vec<f64>,
        y: Vec<f64>,
        x: Vec<f64>,
    }
    let mut groups: Vec<Group> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(row_error(line, format!("expected {} fields, found {}", names.len(), rec.len())));
        }
        let num = |k: usize| -> Result<f64> {
            let cell = &rec[k];
            if cell.is_empty() {
                return Err(row_error(line, format!("missing value in column '{}'", names[k])));
            }
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| row_error(line, format!("non-numeric value '{cell}' in column '{}'", names[k])))
        };
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(row_error(line, "missing id"));
        }
        let time = num(1)?;
        if time < 0.0 {
            return Err(row_error(line, format!("negative time {time} for id {id}")));
        }
        let y = num(2)?;
        if !family.validate_response(y) {
            return Err(row_error(line, format!("response {y} invalid for {family} family (id {id})")));
        }
        let mut xs = Vec::with_capacity(p);
        if intercept {
            xs.push(1.0);
        }
        for k in 3..names.len() {
            xs.push(num(k)?);
        }
        let continues = groups.last().is_some_and(|g| g.id == id);
        if !continues {
            if groups.iter().any(|g| g.id == id) {
                return Err(row_error(line, format!("rows for id {id} are not contiguous")));
            }
            groups.push(Group {
                id: id.clone(),
                times: Vec::new(),
                y: Vec::new(),
                x: Vec::new(),
            });
        }
        let g = groups.last_mut().expect("group exists");
        if let Some(&prev) = g.times.last() {
            if time <= prev {
                return Err(row_error(line, format!("time {time} not after {prev} for id {id}")));
            }
        }
        g.times.push(time);
        g.y.push(y);
        g.x.extend(xs);
    }
    if groups.is_empty() {
        return Err(GeeError::InvalidData("no data rows".into()));
    }
    let clusters = groups
        .into_iter()
        .map(|g| {
            let n = g.y.len();
            Cluster::new(g.id, DVector::from_vec(g.y), DMatrix::from_row_slice(n, p, &g.x), g.times)
        })
        .collect::<Result<Vec<_>>>()?;
    LongitudinalDataset::with_names(clusters, family, covariates)
}

pub fn read_long_csv_path(path: &Path, family: Family, intercept: bool) -> Result<LongitudinalDataset> {
    read_long_csv(std::fs::File::open(path)?, family, intercept)
}

/// Write a dataset in long format. A covariate named `intercept` is omitted.
pub fn write_long_csv<W: Write>(dataset: &LongitudinalDataset, writer: W) -> Result<()> {
    let names = dataset.covariate_names();
    let keep: Vec<usize> = (0..dataset.p()).filter(|&j| names[j] != INTERCEPT).collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "time".to_string(), "y".to_string()];
    header.extend(keep.iter().map(|&j| names[j].clone()));
    w.write_record(&header)?;
    for c in dataset.clusters() {
        for t in 0..c.len() {
            let mut row = vec![c.id.clone(), c.waves[t].to_string(), c.y[t].to_string()];
            row.extend(keep.iter().map(|&j| c.x[(t, j)].to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
