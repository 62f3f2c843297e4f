//! Pixel-wise k-means, patient-wise k-medoids, label alignment, the
//! resampling stability loss and the Calinski-Harabasz index.

mod hungarian;
mod kmeans;
mod kmedoids;
mod stability;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use hungarian::min_cost_assignment;
pub use kmeans::{kmeans_fit, kmeans_predict};
pub use kmedoids::{kmedoids_fit, KMedoids};
pub use stability::{
    align_labels, label_distance, stability_distance, stability_loss, stability_score, Alignment, StabilityOutcome,
    StabilitySettings,
};

pub const DEFAULT_N_INIT: usize = 10;
pub const DEFAULT_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// `eta × d`
    pub centroids: Matrix,
    pub eta: usize,
    /// Within-cluster sum of squared distances on the fitting points.
    pub inertia: f64,
}

impl ClusterModel {
    pub fn predict(&self, points: &Matrix) -> Result<Vec<usize>> {
        kmeans_predict(self, points)
    }

    /// One centroid per line, whitespace separated.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for row in self.centroids.iter_rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(s, "{}", cells.join(" ")).expect("write to string");
        }
        fs::write(path, s)?;
        Ok(())
    }
}

/// Sub-region labels for one patient, aligned with its `pixel_coords`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub patient_id: String,
    pub labels: Vec<usize>,
    pub eta: usize,
}

impl LabelMap {
    pub fn new(patient_id: impl Into<String>, labels: Vec<usize>, eta: usize) -> Result<Self> {
        if let Some(&l) = labels.iter().find(|&&l| l >= eta) {
            return Err(Error::invalid(format!("label {l} out of range for {eta} clusters")));
        }
        Ok(LabelMap {
            patient_id: patient_id.into(),
            labels,
            eta,
        })
    }

    /// CSV `row,col,label`.
    pub fn write_csv(&self, coords: &[(usize, usize)], path: &Path) -> Result<()> {
        if coords.len() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.labels.len(),
                found: coords.len(),
            });
        }
        let mut s = String::from("row,col,label\n");
        for (&(r, c), l) in coords.iter().zip(&self.labels) {
            writeln!(s, "{r},{c},{l}").expect("write to string");
        }
        fs::write(path, s)?;
        Ok(())
    }
}

/// Ratio of between- to within-cluster dispersion, each divided by its
/// degrees of freedom. Labels must cover `0..eta` with `2 <= eta < n`.
pub fn calinski_harabasz(points: &Matrix, labels: &[usize]) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    let eta = labels.iter().max().map_or(0, |&m| m + 1);
    let d = points.cols();
    let mut counts = vec![0usize; eta];
    let mut means = Matrix::zeros(eta, d);
    for (&l, x) in labels.iter().zip(points.iter_rows()) {
        counts[l] += 1;
        for (m, v) in means.row_mut(l).iter_mut().zip(x) {
            *m += v;
        }
    }
    if eta < 2 || counts.contains(&0) || n <= eta {
        return Err(Error::Degenerate("Calinski-Harabasz needs 2 <= clusters < points, none empty"));
    }
    for k in 0..eta {
        let c = counts[k] as f64;
        means.row_mut(k).iter_mut().for_each(|m| *m /= c);
    }
    let mut grand = vec![0.0; d];
    for x in points.iter_rows() {
        for (g, v) in grand.iter_mut().zip(x) {
            *g += v / n as f64;
        }
    }
    let mut between = 0.0;
    for k in 0..eta {
        let dist: f64 = means.row(k).iter().zip(&grand).map(|(a, b)| (a - b) * (a - b)).sum();
        between += counts[k] as f64 * dist;
    }
    let within: f64 = labels
        .iter()
        .zip(points.iter_rows())
        .map(|(&l, x)| crate::matrix::squared_distance(x, means.row(l)))
        .sum();
    if !(within > 0.0) {
        return Err(Error::Degenerate("Calinski-Harabasz with zero within-cluster dispersion"));
    }
    Ok((between / (eta - 1) as f64) / (within / (n - eta) as f64))
}
