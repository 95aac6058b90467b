//! Result files: one JSON document per run, written atomically.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{NeroResult, RESULT_FORMAT};
use crate::groups::GroupKind;
use crate::metrics::MetricName;

#[derive(Debug, Error)]
pub enum ResultError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: unsupported result format {found:?}")]
    Format { path: PathBuf, found: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ResultError + '_ {
    move |source| ResultError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes to a hidden temporary file in the target directory, syncs it and
/// renames it into place. Readers see either the previous file or the
/// complete new one; an interrupted write leaves only the temp file, which
/// `list_results` ignores.
pub fn write_result(result: &NeroResult, path: &Path) -> Result<(), ResultError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    let written = (|| {
        let file = File::create(&tmp).map_err(io(&tmp))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, result).map_err(|source| ResultError::Json {
            path: tmp.clone(),
            source,
        })?;
        w.flush().map_err(io(&tmp))?;
        w.get_ref().sync_all().map_err(io(&tmp))?;
        fs::rename(&tmp, path).map_err(io(path))
    })();
    if written.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    written?;
    // Persist the rename itself. Not every platform can open a directory.
    if let Ok(d) = File::open(&dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

pub fn read_result(path: &Path) -> Result<NeroResult, ResultError> {
    let file = File::open(path).map_err(io(path))?;
    let result: NeroResult =
        serde_json::from_reader(BufReader::new(file)).map_err(|source| ResultError::Json {
            path: path.to_path_buf(),
            source,
        })?;
    if result.format != RESULT_FORMAT {
        return Err(ResultError::Format {
            path: path.to_path_buf(),
            found: result.format,
        });
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunListing {
    pub run_id: String,
    pub started_at: String,
    pub finished_at: String,
    pub metric: MetricName,
    pub group: GroupKind,
    pub orbit_size: usize,
    pub model: String,
    pub provenance: String,
    pub sample_count: usize,
    pub path: PathBuf,
}

impl RunListing {
    pub fn of(result: &NeroResult, path: &Path) -> RunListing {
        RunListing {
            run_id: result.run_id.clone(),
            started_at: result.started_at.clone(),
            finished_at: result.finished_at.clone(),
            metric: result.metric,
            group: result.orbit_spec.group,
            orbit_size: result.orbit.len(),
            model: result.model.name.clone(),
            provenance: result.dataset.provenance.clone(),
            sample_count: result.dataset.sample_count,
            path: path.to_path_buf(),
        }
    }
}

/// Every readable result in `dir`, newest first. Hidden files and files
/// that fail to parse are skipped and reported separately.
pub fn list_results(dir: &Path) -> Result<(Vec<(RunListing, NeroResult)>, Vec<ResultError>), ResultError> {
    let mut found = Vec::new();
    let mut skipped = Vec::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let entry = entry.map_err(io(dir))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || path.extension().is_none_or(|e| e != "json") || !path.is_file() {
            continue;
        }
        match read_result(&path) {
            Ok(r) => found.push((RunListing::of(&r, &path), r)),
            Err(e) => skipped.push(e),
        }
    }
    found.sort_by(|a, b| {
        b.0.started_at
            .cmp(&a.0.started_at)
            .then_with(|| a.0.run_id.cmp(&b.0.run_id))
    });
    Ok((found, skipped))
}
