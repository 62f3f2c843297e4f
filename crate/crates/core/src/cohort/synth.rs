use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Cohort, PatientScan, SurvivalRecord};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

/// Time scale of the exponential survival model, in days.
const BASE_SURVIVAL_DAYS: f64 = 365.0;

/// Parameters of the planted-structure cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub n_regions_true: usize,
    /// (height, width)
    pub image_dims: (usize, usize),
    /// `n_regions_true` rows of `M` modality means.
    pub region_means: Vec<Vec<f64>>,
    pub region_stddevs: Vec<Vec<f64>>,
    pub hazard_weights: Vec<f64>,
    pub censoring_rate: f64,
    pub seed: u64,
    /// Bimodality of the per-patient region proportions. At 0 every patient
    /// draws a flat Dirichlet; larger values split patients into two
    /// phenotypes enriched for the first or the last region.
    #[serde(default)]
    pub phenotype_contrast: f64,
}

impl SynthSpec {
    /// Well-separated regions (10σ apart) over three modalities, survival
    /// driven by the first region's share against the last one's.
    pub fn planted(n_patients: usize, n_regions: usize, image_dims: (usize, usize), seed: u64) -> Self {
        let m = 3;
        let region_means = (0..n_regions)
            .map(|r| {
                (0..m)
                    .map(|j| 10.0 * ((r * (j + 1)) % n_regions.max(1)) as f64)
                    .collect()
            })
            .collect();
        let region_stddevs = vec![vec![1.0; m]; n_regions];
        let mut hazard_weights = vec![0.0; n_regions];
        if n_regions >= 2 {
            hazard_weights[0] = 3.0;
            hazard_weights[n_regions - 1] = -3.0;
        }
        SynthSpec {
            n_patients,
            n_regions_true: n_regions,
            image_dims,
            region_means,
            region_stddevs,
            hazard_weights,
            censoring_rate: 0.2,
            seed,
            phenotype_contrast: 8.0,
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.region_means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.n_regions_true;
        if r < 2 {
            return Err(Error::invalid(format!("n_regions_true must be at least 2, got {r}")));
        }
        if self.n_patients == 0 {
            return Err(Error::invalid("n_patients must be positive"));
        }
        let (h, w) = self.image_dims;
        if h < 8 || w < 8 {
            return Err(Error::invalid(format!("image_dims must be at least 8x8, got {h}x{w}")));
        }
        let m = self.n_modalities();
        if m == 0 {
            return Err(Error::invalid("region_means needs at least one modality"));
        }
        if self.region_means.len() != r || self.region_stddevs.len() != r || self.hazard_weights.len() != r {
            return Err(Error::invalid("region_means, region_stddevs and hazard_weights need one entry per region"));
        }
        for (means, sds) in self.region_means.iter().zip(&self.region_stddevs) {
            if means.len() != m || sds.len() != m {
                return Err(Error::invalid("every region needs one mean and stddev per modality"));
            }
            if sds.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::invalid("region stddevs must be positive"));
            }
            if means.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("region means must be finite"));
            }
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err(Error::invalid(format!(
                "censoring_rate must lie in [0, 1), got {}",
                self.censoring_rate
            )));
        }
        if !(self.phenotype_contrast >= 0.0 && self.phenotype_contrast.is_finite()) {
            return Err(Error::invalid("phenotype_contrast must be nonnegative"));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn dirichlet(rng: &mut impl Rng, conc: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = conc
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive concentration").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / conc.len() as f64; conc.len()]
    }
}

/// Star-shaped blob: pixels whose distance to the centre is below a
/// low-order Fourier radius profile.
fn blob_mask(rng: &mut impl Rng, (h, w): (usize, usize)) -> (Vec<(usize, usize)>, (f64, f64)) {
    let cy = h as f64 / 2.0 + rng.random_range(-0.05..0.05) * h as f64;
    let cx = w as f64 / 2.0 + rng.random_range(-0.05..0.05) * w as f64;
    let r0 = 0.38 * h.min(w) as f64 * rng.random_range(0.8..1.0);
    let (a1, p1) = (rng.random_range(0.0..0.15), rng.random_range(0.0..std::f64::consts::TAU));
    let (a2, p2) = (rng.random_range(0.0..0.1), rng.random_range(0.0..std::f64::consts::TAU));
    let mut coords = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            let theta = dy.atan2(dx);
            let radius = r0 * (1.0 + a1 * (theta - p1).cos() + a2 * (2.0 * theta - p2).cos());
            if (dy * dy + dx * dx).sqrt() <= radius {
                coords.push((r, c));
            }
        }
    }
    (coords, (cy, cx))
}

struct SynthPatient {
    scan: PatientScan,
    record: SurvivalRecord,
    labels: Vec<usize>,
}

fn generate_patient(spec: &SynthSpec, index: usize) -> SynthPatient {
    let mut rng = seed::derived_rng(spec.seed, "synth-patient", index as u64);
    let r = spec.n_regions_true;
    let m = spec.n_modalities();

    let (coords, (cy, cx)) = blob_mask(&mut rng, spec.image_dims);

    let mut conc = vec![1.0; r];
    if spec.phenotype_contrast > 0.0 {
        let enriched = if rng.random_bool(0.5) { 0 } else { r - 1 };
        conc[enriched] += spec.phenotype_contrast;
    }
    let props = dirichlet(&mut rng, &conc);

    // Angular sectors from a random start angle give contiguous regions
    // with the drawn proportions.
    let start = rng.random_range(0.0..std::f64::consts::TAU);
    let mut order: Vec<(f64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(i, &(row, col))| {
            let a = (row as f64 + 0.5 - cy).atan2(col as f64 + 0.5 - cx);
            ((a - start).rem_euclid(std::f64::consts::TAU), i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = coords.len();
    let mut labels = vec![0; n];
    let mut cum = 0.0;
    let mut begin = 0;
    for (region, p) in props.iter().enumerate() {
        cum += p;
        let end = if region + 1 == r { n } else { ((cum * n as f64).round() as usize).min(n) };
        for &(_, i) in &order[begin..end.max(begin)] {
            labels[i] = region;
        }
        begin = end.max(begin);
    }

    let mut values = Vec::with_capacity(n * m);
    for &label in &labels {
        for j in 0..m {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(spec.region_means[label][j] + spec.region_stddevs[label][j] * z);
        }
    }

    let mut counts = vec![0usize; r];
    labels.iter().for_each(|&l| counts[l] += 1);
    let linear: f64 = counts
        .iter()
        .zip(&spec.hazard_weights)
        .map(|(&c, w)| w * c as f64 / n.max(1) as f64)
        .sum();
    let rate = softplus(linear) / BASE_SURVIVAL_DAYS;
    let event_time: f64 = Exp::new(rate).expect("positive rate").sample(&mut rng);
    let censored = rng.random_bool(spec.censoring_rate);
    let time = if censored {
        event_time * rng.random_range(0.05..1.0)
    } else {
        event_time
    }
    .max(1e-6);

    let id = format!("P{index:04}");
    SynthPatient {
        scan: PatientScan {
            patient_id: id.clone(),
            pixel_values: Matrix::from_vec(n, m, values).expect("sized above"),
            pixel_coords: coords,
            image_dims: spec.image_dims,
        },
        record: SurvivalRecord {
            patient_id: id,
            time,
            event: !censored,
        },
        labels,
    }
}

/// Generates a cohort with planted regions and survival signal. Returns the
/// cohort and each patient's ground-truth region label per pixel.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Cohort, Vec<Vec<usize>>)> {
    spec.validate()?;
    let patients: Vec<SynthPatient> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(spec, i))
        .collect();
    let mut scans = Vec::with_capacity(patients.len());
    let mut survival = Vec::with_capacity(patients.len());
    let mut labels = Vec::with_capacity(patients.len());
    for p in patients {
        scans.push(p.scan);
        survival.push(p.record);
        labels.push(p.labels);
    }
    let names = (0..spec.n_modalities()).map(|j| format!("m{}", j + 1)).collect();
    Ok((Cohort::new(scans, survival, names)?, labels))
}
