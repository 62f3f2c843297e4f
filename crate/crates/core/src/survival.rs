//! Kaplan-Meier curves, the two-sample log-rank test, patient risk grouping
//! by k-medoids on texture features, and the significance loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::clustering::kmedoids_fit;
use crate::cohort::SurvivalRecord;
use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::texture::PatientFeatureVector;

pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// Distinct times with at least one death, ascending.
    pub event_times: Vec<f64>,
    pub survival_probs: Vec<f64>,
    pub at_risk: Vec<usize>,
}

impl KmCurve {
    /// First time the curve reaches 0.5 or below; infinite if it never does.
    pub fn median(&self) -> f64 {
        self.event_times
            .iter()
            .zip(&self.survival_probs)
            .find(|&(_, &s)| s <= 0.5)
            .map_or(f64::INFINITY, |(&t, _)| t)
    }

    /// Step-function value at `t`.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&e| e <= t);
        if k == 0 {
            1.0
        } else {
            self.survival_probs[k - 1]
        }
    }
}

fn sorted(records: &[&SurvivalRecord]) -> Vec<(f64, bool)> {
    let mut v: Vec<(f64, bool)> = records.iter().map(|r| (r.time, r.event)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Product-limit estimator. Subjects censored at an event time are still at
/// risk at that time.
pub fn km_fit(records: &[SurvivalRecord]) -> Result<KmCurve> {
    km_fit_refs(&records.iter().collect::<Vec<_>>())
}

fn km_fit_refs(records: &[&SurvivalRecord]) -> Result<KmCurve> {
    if records.is_empty() {
        return Err(Error::invalid("Kaplan-Meier needs at least one record"));
    }
    let data = sorted(records);
    let mut curve = KmCurve {
        event_times: vec![],
        survival_probs: vec![],
        at_risk: vec![],
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < data.len() {
        let t = data[i].0;
        let n = data.len() - i;
        let mut deaths = 0;
        let mut j = i;
        while j < data.len() && data[j].0 == t {
            deaths += data[j].1 as usize;
            j += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / n as f64;
            curve.event_times.push(t);
            curve.survival_probs.push(s);
            curve.at_risk.push(n);
        }
        i = j;
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi_square: f64,
    pub p_value: f64,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi_square_sf_1df(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(0.5, x / 2.0)
}

pub fn logrank_test(group_a: &[SurvivalRecord], group_b: &[SurvivalRecord]) -> Result<LogRankResult> {
    logrank_refs(&group_a.iter().collect::<Vec<_>>(), &group_b.iter().collect::<Vec<_>>())
}

fn logrank_refs(a: &[&SurvivalRecord], b: &[&SurvivalRecord]) -> Result<LogRankResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("log-rank test needs two nonempty groups"));
    }
    let mut times: Vec<f64> = a.iter().chain(b).filter(|r| r.event).map(|r| r.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    for &t in &times {
        let count = |g: &[&SurvivalRecord]| {
            let at_risk = g.iter().filter(|r| r.time >= t).count() as f64;
            let deaths = g.iter().filter(|r| r.time == t && r.event).count() as f64;
            (at_risk, deaths)
        };
        let (na, da) = count(a);
        let (nb, db) = count(b);
        let (n, d) = (na + nb, da + db);
        o_minus_e += da - d * na / n;
        if n > 1.0 {
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1.0);
        }
    }
    if !(var > 0.0) {
        return Err(Error::Degenerate("log-rank test with zero variance"));
    }
    let chi_square = o_minus_e * o_minus_e / var;
    Ok(LogRankResult {
        chi_square,
        p_value: chi_square_sf_1df(chi_square),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskGroup {
    Low,
    High,
}

impl RiskGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::Low => "low",
            RiskGroup::High => "high",
        }
    }
}

/// Everything needed to place a new patient into a risk group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub feature_mean: Vec<f64>,
    /// Columns with zero spread keep a scale of 1.
    pub feature_scale: Vec<f64>,
    /// Two standardized medoid feature rows.
    pub medoids: Matrix,
    /// Which medoid row is the high-risk group.
    pub high_risk: usize,
}

impl RiskModel {
    fn standardize(&self, f: &PatientFeatureVector) -> Result<Vec<f64>> {
        let v = f.values();
        if v.len() != self.feature_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_mean.len(),
                found: v.len(),
            });
        }
        Ok(v.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect())
    }

    pub fn assign(&self, features: &[PatientFeatureVector]) -> Result<Vec<RiskGroup>> {
        features
            .iter()
            .map(|f| {
                let z = self.standardize(f)?;
                let d0 = squared_distance(&z, self.medoids.row(0));
                let d1 = squared_distance(&z, self.medoids.row(1));
                let nearest = if d1 < d0 { 1 } else { 0 };
                Ok(if nearest == self.high_risk { RiskGroup::High } else { RiskGroup::Low })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskGrouping {
    pub groups: Vec<RiskGroup>,
    pub logrank: LogRankResult,
    pub model: RiskModel,
}

impl RiskGrouping {
    /// Records split into (high, low) risk.
    pub fn partition<'a>(&self, records: &'a [SurvivalRecord]) -> (Vec<&'a SurvivalRecord>, Vec<&'a SurvivalRecord>) {
        let high = records.iter().zip(&self.groups).filter(|(_, g)| **g == RiskGroup::High).map(|(r, _)| r).collect();
        let low = records.iter().zip(&self.groups).filter(|(_, g)| **g == RiskGroup::Low).map(|(r, _)| r).collect();
        (high, low)
    }

    pub fn curves(&self, records: &[SurvivalRecord]) -> Result<(KmCurve, KmCurve)> {
        let (high, low) = self.partition(records);
        Ok((km_fit_refs(&high)?, km_fit_refs(&low)?))
    }
}

/// Standardizes feature columns, splits patients with 2-medoids, labels the
/// group with the lower Kaplan-Meier median as high risk, and compares the
/// groups with the log-rank test. `records[i]` belongs to `features[i]`.
pub fn risk_grouping(features: &[PatientFeatureVector], records: &[SurvivalRecord]) -> Result<RiskGrouping> {
    let n = features.len();
    if n < 4 {
        return Err(Error::invalid(format!("risk grouping needs at least 4 patients, got {n}")));
    }
    if records.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: records.len(),
        });
    }
    if let Some((f, r)) = features.iter().zip(records).find(|(f, r)| f.patient_id != r.patient_id) {
        return Err(Error::invalid(format!(
            "feature row {} does not match survival record {}",
            f.patient_id, r.patient_id
        )));
    }
    let rows: Vec<Vec<f64>> = features.iter().map(PatientFeatureVector::values).collect();
    let raw = Matrix::from_rows(&rows)?;
    let d = raw.cols();
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for j in 0..d {
        let col = raw.column(j);
        let m = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        mean[j] = m;
        scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let mut z = raw.clone();
    for i in 0..n {
        for (j, v) in z.row_mut(i).iter_mut().enumerate() {
            *v = (*v - mean[j]) / scale[j];
        }
    }
    let pam = kmedoids_fit(&z, 2)?;
    let members = |g: usize| -> Vec<&SurvivalRecord> {
        records.iter().zip(&pam.labels).filter(|(_, &l)| l == g).map(|(r, _)| r).collect()
    };
    let (g0, g1) = (members(0), members(1));
    if g0.is_empty() || g1.is_empty() {
        return Err(Error::Degenerate("risk grouping produced a single group"));
    }
    let (m0, m1) = (km_fit_refs(&g0)?.median(), km_fit_refs(&g1)?.median());
    let mean_time = |g: &[&SurvivalRecord]| g.iter().map(|r| r.time).sum::<f64>() / g.len() as f64;
    let high_risk = if m0 < m1 || (m0 == m1 && mean_time(&g0) <= mean_time(&g1)) { 0 } else { 1 };
    let logrank = logrank_refs(&g0, &g1)?;
    let groups = pam
        .labels
        .iter()
        .map(|&l| if l == high_risk { RiskGroup::High } else { RiskGroup::Low })
        .collect();
    Ok(RiskGrouping {
        groups,
        logrank,
        model: RiskModel {
            feature_mean: mean,
            feature_scale: scale,
            medoids: z.select_rows(&pam.medoids),
            high_risk,
        },
    })
}

/// The significance loss as printed (`raw`: large and positive for small p)
/// and its negation (`oriented`: increasing in p, for minimization).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceLoss {
    pub raw: f64,
    pub oriented: f64,
}

pub fn significance_loss(p: f64, tau: f64) -> Result<SignificanceLoss> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("p-value must lie in (0, 1), got {p}")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    let ratio = (tau / p).ln();
    let raw = if p <= tau { ratio / (1.0 - tau) } else { -ratio / tau.ln() };
    Ok(SignificanceLoss { raw, oriented: -raw })
}

/// CSV `time,survival,at_risk,group`, preceded by a `#` comment line
/// carrying the log-rank statistic when one is given.
pub fn write_km_csv(curves: &[(&str, &KmCurve)], logrank: Option<&LogRankResult>, path: &Path) -> Result<()> {
    let mut s = String::new();
    if let Some(lr) = logrank {
        writeln!(s, "# chi_square={},p_value={}", lr.chi_square, lr.p_value).expect("write to string");
    }
    s.push_str("time,survival,at_risk,group\n");
    for (group, c) in curves {
        for ((t, p), n) in c.event_times.iter().zip(&c.survival_probs).zip(&c.at_risk) {
            writeln!(s, "{t},{p},{n},{group}").expect("write to string");
        }
    }
    fs::write(path, s)?;
    Ok(())
}
