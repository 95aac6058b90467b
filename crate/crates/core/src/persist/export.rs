//! Long-format CSV export: one row per (sample, orbit position) and one per
//! aggregate position. Values use 17 significant digits so that reading
//! them back reproduces the same f64; NaN is written as `NaN`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::NeroResult;

pub const RECORDS_FILE: &str = "records.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad value {value:?}")]
    Value { path: PathBuf, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub sample_id: String,
    pub class_label: Option<u32>,
    pub orbit_index: usize,
    pub element: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub orbit_index: usize,
    pub element: String,
    pub value: String,
    pub coverage: usize,
}

pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.16e}")
    }
}

pub fn parse_value(s: &str) -> Option<f64> {
    if s == "NaN" {
        Some(f64::NAN)
    } else {
        s.parse().ok()
    }
}

pub fn record_rows(result: &NeroResult) -> Vec<RecordRow> {
    let labels: Vec<String> = result.orbit.elements.iter().map(|g| g.label()).collect();
    result
        .records
        .iter()
        .flat_map(|r| {
            let labels = &labels;
            r.values.iter().enumerate().map(move |(i, v)| RecordRow {
                sample_id: r.sample_id.clone(),
                class_label: r.class_label,
                orbit_index: i,
                element: labels[i].clone(),
                value: format_value(*v),
            })
        })
        .collect()
}

pub fn aggregate_rows(result: &NeroResult) -> Vec<AggregateRow> {
    result
        .aggregate
        .values
        .iter()
        .zip(&result.aggregate.coverage)
        .enumerate()
        .map(|(i, (v, c))| AggregateRow {
            orbit_index: i,
            element: result.orbit.elements[i].label(),
            value: format_value(*v),
            coverage: *c,
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExportError> {
    let csv_err = |source| ExportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExportError> {
    let csv_err = |source| ExportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    csv::Reader::from_path(path)
        .map_err(csv_err)?
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(csv_err)
}

/// Writes `records.csv` and `aggregate.csv` into `dir` and returns their paths.
pub fn export_csv(result: &NeroResult, dir: &Path) -> Result<[PathBuf; 2], ExportError> {
    std::fs::create_dir_all(dir).map_err(|source| ExportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let records = dir.join(RECORDS_FILE);
    let aggregate = dir.join(AGGREGATE_FILE);
    write_rows(&records, &record_rows(result))?;
    write_rows(&aggregate, &aggregate_rows(result))?;
    Ok([records, aggregate])
}

/// Reads `records.csv` back into `(sample_id, values)` pairs in file order.
pub fn import_records(path: &Path) -> Result<Vec<(String, Vec<f64>)>, ExportError> {
    let rows: Vec<RecordRow> = read_rows(path)?;
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for row in rows {
        let v = parse_value(&row.value).ok_or_else(|| ExportError::Value {
            path: path.to_path_buf(),
            value: row.value.clone(),
        })?;
        match out.last_mut() {
            Some((id, values)) if *id == row.sample_id => values.push(v),
            _ => out.push((row.sample_id, vec![v])),
        }
    }
    Ok(out)
}

pub fn import_aggregate(path: &Path) -> Result<Vec<(f64, usize)>, ExportError> {
    let rows: Vec<AggregateRow> = read_rows(path)?;
    rows.into_iter()
        .map(|row| {
            parse_value(&row.value)
                .map(|v| (v, row.coverage))
                .ok_or_else(|| ExportError::Value {
                    path: path.to_path_buf(),
                    value: row.value,
                })
        })
        .collect()
}
