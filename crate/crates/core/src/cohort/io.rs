//! Cohort directory format: `manifest.json` plus one pixel CSV per patient
//! (`row,col,<modality_1>,...,<modality_M>`). Reals are written with 17
//! significant digits so a write/read cycle is exact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Cohort, PatientScan, SurvivalRecord};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    modality_names: Vec<String>,
    patients: Vec<ManifestPatient>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPatient {
    patient_id: String,
    pixel_file: String,
    image_dims: (usize, usize),
    time: f64,
    event: bool,
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("patients"))?;
    let mut patients = Vec::with_capacity(cohort.n_patients());
    for (scan, rec) in cohort.scans.iter().zip(&cohort.survival) {
        let rel = format!("patients/{}.csv", scan.patient_id);
        let mut out = BufWriter::new(fs::File::create(dir.join(&rel))?);
        write!(out, "row,col")?;
        for name in &cohort.modality_names {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for (&(r, c), row) in scan.pixel_coords.iter().zip(scan.pixel_values.iter_rows()) {
            write!(out, "{r},{c}")?;
            for &v in row {
                write!(out, ",{}", fmt_real(v))?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        patients.push(ManifestPatient {
            patient_id: scan.patient_id.clone(),
            pixel_file: rel,
            image_dims: scan.image_dims,
            time: rec.time,
            event: rec.event,
        });
    }
    let manifest = Manifest {
        modality_names: cohort.modality_names.clone(),
        patients,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Reads a cohort from its directory (or directly from its manifest path).
pub fn read_cohort(path: &Path) -> Result<Cohort> {
    let manifest_file = manifest_path(path);
    let text = fs::read_to_string(&manifest_file).map_err(|e| Error::MalformedManifest {
        path: manifest_file.clone(),
        reason: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: manifest_file.clone(),
        reason: e.to_string(),
    })?;
    let base = manifest_file.parent().unwrap_or(Path::new("."));
    let m = manifest.modality_names.len();
    let mut scans = Vec::with_capacity(manifest.patients.len());
    let mut survival = Vec::with_capacity(manifest.patients.len());
    for p in manifest.patients {
        let file = base.join(&p.pixel_file);
        if !file.is_file() {
            return Err(Error::MissingPatientFile(file));
        }
        let (coords, values) = read_pixels(&file, m)?;
        scans.push(PatientScan {
            patient_id: p.patient_id.clone(),
            pixel_values: values,
            pixel_coords: coords,
            image_dims: p.image_dims,
        });
        survival.push(SurvivalRecord::new(p.patient_id, p.time, p.event).map_err(|e| {
            Error::MalformedManifest {
                path: manifest_file.clone(),
                reason: e.to_string(),
            }
        })?);
    }
    Cohort::new(scans, survival, manifest.modality_names)
}

fn read_pixels(file: &Path, m: usize) -> Result<(Vec<(usize, usize)>, Matrix)> {
    let parse_err = |line: u64, reason: String| Error::Parse {
        file: file.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(file)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if headers.len() < 2 || &headers[0] != "row" || &headers[1] != "col" {
        return Err(parse_err(1, "header must start with `row,col`".into()));
    }
    if headers.len() != m + 2 {
        return Err(Error::ModalityMismatch {
            expected: m,
            found: headers.len() - 2,
        });
    }
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != m + 2 {
            return Err(parse_err(line, format!("expected {} fields, found {}", m + 2, rec.len())));
        }
        let idx = |k: usize| -> Result<usize> {
            rec[k]
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("invalid coordinate `{}`", &rec[k])))
        };
        coords.push((idx(0)?, idx(1)?));
        for k in 2..m + 2 {
            let v: f64 = rec[k]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric value `{}`", &rec[k])))?;
            values.push(v);
        }
    }
    let n = coords.len();
    Ok((coords, Matrix::from_vec(n, m, values)?))
}
