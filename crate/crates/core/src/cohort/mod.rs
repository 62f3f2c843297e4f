//! Multi-modal pixel cohorts: data model, intensity filtering and scaling,
//! patient-level splitting, synthetic generation and on-disk format.

mod io;
mod synth;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

pub use io::{read_cohort, write_cohort, MANIFEST_FILE};
pub use synth::{generate_synthetic, SynthSpec};

/// One patient's in-mask pixels. Row `i` of `pixel_values` lives at `pixel_coords[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScan {
    pub patient_id: String,
    pub pixel_values: Matrix,
    pub pixel_coords: Vec<(usize, usize)>,
    /// (height, width)
    pub image_dims: (usize, usize),
}

impl PatientScan {
    pub fn n_pixels(&self) -> usize {
        self.pixel_coords.len()
    }

    pub fn validate(&self, n_modalities: usize) -> Result<()> {
        if self.pixel_values.rows() != self.pixel_coords.len() {
            return Err(Error::invalid(format!(
                "patient {}: {} pixel rows but {} coordinates",
                self.patient_id,
                self.pixel_values.rows(),
                self.pixel_coords.len()
            )));
        }
        if self.pixel_values.rows() > 0 && self.pixel_values.cols() != n_modalities {
            return Err(Error::ModalityMismatch {
                expected: n_modalities,
                found: self.pixel_values.cols(),
            });
        }
        let (h, w) = self.image_dims;
        if let Some(&(r, c)) = self.pixel_coords.iter().find(|&&(r, c)| r >= h || c >= w) {
            return Err(Error::invalid(format!(
                "patient {}: coordinate ({r}, {c}) outside {h}x{w}",
                self.patient_id
            )));
        }
        if self.pixel_values.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "patient {}: non-finite intensity",
                self.patient_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    /// Days. Always positive.
    pub time: f64,
    /// `true` when death was observed, `false` when censored.
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(patient_id: impl Into<String>, time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0 && time.is_finite()) {
            return Err(Error::invalid(format!("survival time must be positive, got {time}")));
        }
        Ok(SurvivalRecord {
            patient_id: patient_id.into(),
            time,
            event,
        })
    }
}

/// Patients with their scans and survival outcomes, aligned by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub scans: Vec<PatientScan>,
    pub survival: Vec<SurvivalRecord>,
    pub modality_names: Vec<String>,
}

impl Cohort {
    /// Validates and builds a cohort. Survival records are reordered to match
    /// the scan order by patient id.
    pub fn new(
        scans: Vec<PatientScan>,
        survival: Vec<SurvivalRecord>,
        modality_names: Vec<String>,
    ) -> Result<Self> {
        if scans.len() != survival.len() {
            return Err(Error::invalid(format!(
                "{} scans but {} survival records",
                scans.len(),
                survival.len()
            )));
        }
        let mut by_id: HashMap<String, SurvivalRecord> = HashMap::with_capacity(survival.len());
        for rec in survival {
            if rec.time <= 0.0 || !rec.time.is_finite() {
                return Err(Error::invalid(format!(
                    "patient {}: survival time must be positive",
                    rec.patient_id
                )));
            }
            let id = rec.patient_id.clone();
            if by_id.insert(id.clone(), rec).is_some() {
                return Err(Error::invalid(format!("duplicate survival record for {id}")));
            }
        }
        let m = modality_names.len();
        let mut ordered = Vec::with_capacity(scans.len());
        for scan in &scans {
            scan.validate(m)?;
            let rec = by_id.remove(&scan.patient_id).ok_or_else(|| {
                Error::invalid(format!("no survival record for {}", scan.patient_id))
            })?;
            ordered.push(rec);
        }
        Ok(Cohort {
            scans,
            survival: ordered,
            modality_names,
        })
    }

    pub fn n_patients(&self) -> usize {
        self.scans.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.modality_names.len()
    }

    pub fn total_pixels(&self) -> usize {
        self.scans.iter().map(PatientScan::n_pixels).sum()
    }

    /// All pixels of all patients stacked in patient order.
    pub fn pooled_pixels(&self) -> Matrix {
        Matrix::vstack(self.scans.iter().map(|s| &s.pixel_values), self.n_modalities())
            .expect("scans validated against modality count")
    }

    /// Row offsets of each patient in [`Cohort::pooled_pixels`], with a final end offset.
    pub fn pixel_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.scans.len() + 1);
        let mut acc = 0;
        out.push(0);
        for s in &self.scans {
            acc += s.n_pixels();
            out.push(acc);
        }
        out
    }

    /// Sub-cohort of the given patient indices, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Cohort {
        Cohort {
            scans: idx.iter().map(|&i| self.scans[i].clone()).collect(),
            survival: idx.iter().map(|&i| self.survival[i].clone()).collect(),
            modality_names: self.modality_names.clone(),
        }
    }

    fn map_values(&self, mut f: impl FnMut(usize, f64) -> f64) -> Cohort {
        let mut out = self.clone();
        let m = self.n_modalities();
        for scan in &mut out.scans {
            for (k, v) in scan.pixel_values.as_mut_slice().iter_mut().enumerate() {
                *v = f(k % m, *v);
            }
        }
        out
    }
}

/// Per-modality winsorization interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ClipBounds {
    pub fn apply(&self, cohort: &Cohort) -> Result<Cohort> {
        if cohort.n_modalities() != self.lower.len() {
            return Err(Error::ModalityMismatch {
                expected: self.lower.len(),
                found: cohort.n_modalities(),
            });
        }
        Ok(cohort.map_values(|m, v| v.clamp(self.lower[m], self.upper[m])))
    }
}

/// Linear-interpolation quantile of an ascending sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let mut h = (sorted.len() - 1) as f64 * q;
    // (1 - 0.8) / 2 * 10 lands a hair below 1.0
    if (h - h.round()).abs() < 1e-9 {
        h = h.round();
    }
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pooled per-modality quantile bounds keeping the central `gamma` mass.
pub fn quantile_bounds(cohort: &Cohort, gamma: f64) -> Result<ClipBounds> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if cohort.total_pixels() == 0 {
        return Err(Error::EmptyCohort);
    }
    let pooled = cohort.pooled_pixels();
    let (q_lo, q_hi) = ((1.0 - gamma) / 2.0, (1.0 + gamma) / 2.0);
    let mut lower = Vec::with_capacity(cohort.n_modalities());
    let mut upper = Vec::with_capacity(cohort.n_modalities());
    for m in 0..cohort.n_modalities() {
        let mut col = pooled.column(m);
        col.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&col, q_lo));
        upper.push(quantile_sorted(&col, q_hi));
    }
    Ok(ClipBounds { lower, upper })
}

/// Winsorizes every modality into its pooled central-`gamma` quantile interval.
pub fn quantile_filter(cohort: &Cohort, gamma: f64) -> Result<Cohort> {
    quantile_filter_with_bounds(cohort, gamma).map(|(c, _)| c)
}

pub fn quantile_filter_with_bounds(cohort: &Cohort, gamma: f64) -> Result<(Cohort, ClipBounds)> {
    let bounds = quantile_bounds(cohort, gamma)?;
    Ok((bounds.apply(cohort)?, bounds))
}

/// Pooled per-modality mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ModalityStats {
    pub fn apply(&self, cohort: &Cohort) -> Result<Cohort> {
        if cohort.n_modalities() != self.mean.len() {
            return Err(Error::ModalityMismatch {
                expected: self.mean.len(),
                found: cohort.n_modalities(),
            });
        }
        Ok(cohort.map_values(|m, v| (v - self.mean[m]) / self.std[m]))
    }
}

pub fn modality_stats(cohort: &Cohort) -> Result<ModalityStats> {
    let n = cohort.total_pixels();
    if n == 0 {
        return Err(Error::EmptyCohort);
    }
    let m = cohort.n_modalities();
    let mut mean = vec![0.0; m];
    for scan in &cohort.scans {
        for row in scan.pixel_values.iter_rows() {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut var = vec![0.0; m];
    for scan in &cohort.scans {
        for row in scan.pixel_values.iter_rows() {
            for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
    }
    let mut std = Vec::with_capacity(m);
    for (j, v) in var.into_iter().enumerate() {
        let s = (v / n as f64).sqrt();
        if !(s > 0.0) {
            return Err(Error::ZeroVariance(cohort.modality_names[j].clone()));
        }
        std.push(s);
    }
    Ok(ModalityStats { mean, std })
}

/// Scales every modality to pooled mean 0 and population stddev 1.
pub fn standardize(cohort: &Cohort) -> Result<(Cohort, ModalityStats)> {
    let stats = modality_stats(cohort)?;
    Ok((stats.apply(cohort)?, stats))
}

/// Patient-level split. The first part gets `round(fraction * N)` patients;
/// both parts keep the input order.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n_first = (fraction * n as f64).round() as usize;
    if n < 2 || n_first == 0 || n_first == n {
        return Err(Error::invalid(format!(
            "split of {n} patients at fraction {fraction} leaves an empty part"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed));
    let mut first = perm[..n_first].to_vec();
    let mut second = perm[n_first..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

pub fn split_cohort(cohort: &Cohort, fraction: f64, seed: u64) -> Result<(Cohort, Cohort)> {
    let (a, b) = split_indices(cohort.n_patients(), fraction, seed)?;
    Ok((cohort.subset(&a), cohort.subset(&b)))
}
