//! Line-delimited JSON dataset manifests.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dft::{read_dft_header, DType};
use crate::error::{Error, Result};

/// Every problem found while loading a manifest, one line each.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("manifest {path} has {} problem(s):\n  {}", issues.len(), issues.join("\n  "))]
pub struct ManifestError {
    pub path: String,
    pub issues: Vec<String>,
}

/// File paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub t_f: usize,
    pub visual: String,
    pub semantic: String,
    pub waveform: String,
    pub gt: String,
    /// `train`, `val`, `test`, or a fold label such as `fold3`.
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrogram: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub d_v: usize,
    pub d_s: usize,
}

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    pub fn split(&self, label: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == label).collect()
    }

    pub fn to_jsonl(records: &[ManifestRecord]) -> String {
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write(path: &Path, records: &[ManifestRecord]) -> Result<()> {
        std::fs::write(path, Self::to_jsonl(records)).map_err(|e| Error::io(path, e))
    }
}

fn check_matrix(
    issues: &mut Vec<String>,
    rec: &ManifestRecord,
    field: &str,
    path: &Path,
) -> Option<Vec<usize>> {
    match read_dft_header(path) {
        Ok((DType::F64, shape)) => Some(shape),
        Ok((DType::F32, _)) => {
            issues.push(format!("{}: {field}: expected f64 data in {}", rec.id, path.display()));
            None
        }
        Err(e) => {
            issues.push(format!("{}: {field}: {e}", rec.id));
            None
        }
    }
}

/// Parses and validates every record, collecting all problems before failing.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut issues = Vec::new();
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => issues.push(format!("line {}: {e}", n + 1)),
        }
    }

    let mut seen = HashSet::new();
    let mut d_v: Option<(usize, String)> = None;
    let mut d_s: Option<(usize, String)> = None;
    for rec in &records {
        if !seen.insert(rec.id.clone()) {
            issues.push(format!("{}: id: duplicate id", rec.id));
        }
        if rec.t_f == 0 {
            issues.push(format!("{}: t_f: must be positive", rec.id));
        }
        let wav = root.join(&rec.waveform);
        if !wav.is_file() {
            issues.push(format!("{}: waveform: missing file {}", rec.id, wav.display()));
        }
        if let Some(spec) = &rec.spectrogram {
            let p = root.join(spec);
            if let Some(shape) = check_matrix(&mut issues, rec, "spectrogram", &p) {
                if shape.len() != 2 {
                    issues.push(format!("{}: spectrogram: expected F x T, got {shape:?}", rec.id));
                }
            }
        }
        if let Some(shape) = check_matrix(&mut issues, rec, "gt", &root.join(&rec.gt)) {
            if shape != [rec.t_f] {
                issues.push(format!(
                    "{}: gt: length {shape:?} does not match t_f = {}",
                    rec.id, rec.t_f
                ));
            }
        }
        for (field, slot, label) in [
            ("visual", &mut d_v, "D_v"),
            ("semantic", &mut d_s, "D_s"),
        ] {
            let rel = if field == "visual" { &rec.visual } else { &rec.semantic };
            let Some(shape) = check_matrix(&mut issues, rec, field, &root.join(rel)) else {
                continue;
            };
            if shape.len() != 2 || shape[0] != rec.t_f {
                issues.push(format!(
                    "{}: {field}: shape {shape:?} does not match [t_f = {}, D]",
                    rec.id, rec.t_f
                ));
                continue;
            }
            match slot {
                None => *slot = Some((shape[1], rec.id.clone())),
                Some((d, first)) if *d != shape[1] => issues.push(format!(
                    "{}: {field}: inconsistent {label} ({} here, {d} in {first})",
                    rec.id, shape[1]
                )),
                Some(_) => {}
            }
        }
    }
    if records.is_empty() && issues.is_empty() {
        issues.push("no records".to_string());
    }
    if !issues.is_empty() {
        return Err(ManifestError {
            path: path.display().to_string(),
            issues,
        }
        .into());
    }
    Ok(Manifest {
        root,
        records,
        d_v: d_v.map_or(0, |d| d.0),
        d_s: d_s.map_or(0, |d| d.0),
    })
}
