//! Long-format observation CSV with a JSON sidecar declaring the variable
//! kind, and CSV writers for grids, eigenfunctions and scores.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FsgcError, Result};
use crate::latent::{EigenSystem, ScoreMatrix};
use crate::marginal::VariableKind;
use crate::rank::{ObservationSet, Record};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    subject_id: String,
    time: f64,
    value: f64,
}

/// `<data>.meta.json` next to a data file.
pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_observations(path: &Path, data: &ObservationSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in data.records() {
        w.serialize(Row {
            subject_id: r.subject_id,
            time: r.time,
            value: r.value,
        })?;
    }
    w.flush()?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&data.kind())?)?;
    Ok(())
}

pub fn read_kind(path: &Path) -> Result<VariableKind> {
    let meta = sidecar_path(path);
    let text = fs::read_to_string(&meta).map_err(|e| {
        FsgcError::InvalidInput(format!("cannot read metadata {}: {e}", meta.display()))
    })?;
    let kind: VariableKind = serde_json::from_str(&text)?;
    kind.validate()?;
    Ok(kind)
}

/// Reads a long CSV with header `subject_id,time,value`. The kind comes from
/// the sidecar unless given.
pub fn read_observations(path: &Path, kind: Option<VariableKind>) -> Result<ObservationSet> {
    let kind = match kind {
        Some(k) => k,
        None => read_kind(path)?,
    };
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "time", "value"] {
        return Err(FsgcError::InvalidInput(format!(
            "expected header subject_id,time,value in {}",
            path.display()
        )));
    }
    let mut records = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        records.push(Record {
            subject_id: row.subject_id,
            time: row.time,
            value: row.value,
        });
    }
    ObservationSet::from_records(kind, &records)
}

/// Square matrix on a grid: header `time,<t_1>,…`, one row per grid point.
pub fn write_grid_matrix(path: &Path, grid: &[f64], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time".to_string()];
    header.extend(grid.iter().map(|t| t.to_string()));
    w.write_record(&header)?;
    for (j, t) in grid.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(m.row(j).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_grid_matrix`].
pub fn read_grid_matrix(path: &Path) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| FsgcError::InvalidInput(format!("bad number {s:?}: {e}")))
    };
    let grid: Vec<f64> = r.headers()?.iter().skip(1).map(parse).collect::<Result<_>>()?;
    let m = grid.len();
    let mut values = Vec::with_capacity(m * m);
    for rec in r.records() {
        let rec = rec?;
        for v in rec.iter().skip(1) {
            values.push(parse(v)?);
        }
    }
    if values.len() != m * m {
        return Err(FsgcError::GridMismatch {
            expected: m * m,
            actual: values.len(),
        });
    }
    Ok((grid, DMatrix::from_row_slice(m, m, &values)))
}

/// Header `time,psi_1,…,psi_K`.
pub fn write_eigenfunctions(path: &Path, eig: &EigenSystem) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time".to_string()];
    header.extend((1..=eig.retained).map(|k| format!("psi_{k}")));
    w.write_record(&header)?;
    for (j, t) in eig.grid.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(eig.eigenfunctions.row(j).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `subject_id,score_1,…,score_K`.
pub fn write_scores(path: &Path, subjects: &[String], scores: &ScoreMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = scores.scores.ncols();
    let mut header = vec!["subject_id".to_string()];
    header.extend((1..=k).map(|c| format!("score_{c}")));
    w.write_record(&header)?;
    for (i, s) in subjects.iter().enumerate() {
        let mut row = vec![s.clone()];
        row.extend(scores.scores.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
