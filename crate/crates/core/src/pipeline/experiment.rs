use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{evaluate_theta, fit_final, prepare, segment, stability_for, FinalFit, LossBreakdown, PipelineConfig};
use crate::bayesopt::{bo_run, BoSettings, BoTrace, Evaluation, HyperParams, StepKind};
use crate::clustering::calinski_harabasz;
use crate::cohort::Cohort;
use crate::error::{Error, Result, StageExt};
use crate::fae::VariantKind;
use crate::seed;
use crate::survival::{write_km_csv, RiskGroup};
use crate::texture::write_feature_table;

pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const EVALUATIONS_FILE: &str = "evaluations.csv";
pub const VARIANTS_FILE: &str = "variants.csv";
pub const KM_TRAIN_FILE: &str = "km_train.csv";
pub const KM_TEST_FILE: &str = "km_test.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const GROUPS_TRAIN_FILE: &str = "groups_train.csv";
pub const GROUPS_TEST_FILE: &str = "groups_test.csv";

/// One objective call of the optimizer with its loss breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub kind: StepKind,
    pub theta: HyperParams,
    pub breakdown: Option<LossBreakdown>,
    pub error: Option<String>,
}

/// Stability and separation of one transformer variant at one cluster count.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub variant: VariantKind,
    pub eta: usize,
    /// Mean of `1 - d` over the stability trials.
    pub stability_score: Option<f64>,
    /// Sample standard deviation of the per-trial scores.
    pub stability_sd: Option<f64>,
    pub calinski_harabasz: Option<f64>,
    pub error: Option<String>,
}

pub struct Experiment {
    pub config: PipelineConfig,
    pub trace: BoTrace,
    pub evaluations: Vec<EvalRecord>,
    pub final_fit: FinalFit,
    pub variants: Vec<VariantRow>,
}

impl Experiment {
    pub fn best_theta(&self) -> HyperParams {
        self.trace.best_theta
    }
}

/// Optimizer settings with the seed replaced by a stream of the master seed.
pub fn bo_settings(config: &PipelineConfig) -> BoSettings {
    BoSettings {
        seed: seed::derive(config.seed, "bo", 0),
        ..config.bo
    }
}

/// Tunes θ, refits at the best θ, and optionally compares transformer
/// variants at the best quantile threshold. `progress` is called after
/// every objective evaluation with its index.
pub fn run_experiment<F>(cohort: &Cohort, config: &PipelineConfig, mut progress: F) -> Result<Experiment>
where
    F: FnMut(usize, &HyperParams, std::result::Result<&LossBreakdown, &str>),
{
    config.validate()?;
    if cohort.n_patients() == 0 {
        return Err(Error::EmptyCohort);
    }
    let mut results: Vec<(HyperParams, std::result::Result<LossBreakdown, String>)> = Vec::new();
    let settings = bo_settings(config);
    let trace = bo_run(
        |theta: &HyperParams| {
            let r = evaluate_theta(cohort, theta, config).map_err(|e| e.to_string());
            progress(results.len(), theta, r.as_ref().map_err(String::as_str));
            results.push((*theta, r.clone()));
            r.map(|b| Evaluation {
                stability_loss: b.stability_loss,
                significance_loss: b.significance_oriented,
                loss: b.loss,
            })
            .map_err(Error::InvalidInput)
        },
        &settings,
    )?;
    let evaluations = trace
        .steps
        .iter()
        .zip(&results)
        .map(|(st, r)| record(st.kind, r))
        .collect();
    let final_fit = fit_final(cohort, &trace.best_theta, config).stage("fit_final")?;
    let variants = if config.compare_variants {
        compare_variants(cohort, trace.best_theta.gamma, config)?
    } else {
        Vec::new()
    };
    Ok(Experiment {
        config: config.clone(),
        trace,
        evaluations,
        final_fit,
        variants,
    })
}

fn record(kind: StepKind, r: &(HyperParams, std::result::Result<LossBreakdown, String>)) -> EvalRecord {
    EvalRecord {
        kind,
        theta: r.0,
        breakdown: r.1.as_ref().ok().copied(),
        error: r.1.as_ref().err().cloned(),
    }
}

/// Stability score and Calinski-Harabasz index for every transformer
/// variant and every `config.variant_etas` entry at quantile level `gamma`.
/// A failing cell is recorded with its error instead of aborting.
pub fn compare_variants(cohort: &Cohort, gamma: f64, config: &PipelineConfig) -> Result<Vec<VariantRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for kind in VariantKind::ALL {
        let fae = config.fae_config(cohort.n_modalities(), "fae", 0);
        let prep = match prepare(cohort, gamma, kind, &fae) {
            Ok(p) => p,
            Err(e) => {
                for &eta in &config.variant_etas {
                    rows.push(failed(kind, eta, &e));
                }
                continue;
            }
        };
        for &eta in &config.variant_etas {
            let cell = || -> Result<VariantRow> {
                let outcome = stability_for(&prep, kind, &config.stability_settings(eta, 0), config).stage("stability")?;
                let scores: Vec<f64> = outcome.distances.iter().map(|d| 1.0 - d).collect();
                let (model, _) = segment(&prep, eta, config)?;
                let labels = model.predict(&prep.latents)?;
                let ch = calinski_harabasz(&prep.latents, &labels).stage("calinski_harabasz")?;
                Ok(VariantRow {
                    variant: kind,
                    eta,
                    stability_score: Some(outcome.score()),
                    stability_sd: Some(sample_sd(&scores)),
                    calinski_harabasz: Some(ch),
                    error: None,
                })
            };
            rows.push(cell().unwrap_or_else(|e| failed(kind, eta, &e)));
        }
    }
    Ok(rows)
}

fn failed(kind: VariantKind, eta: usize, e: &Error) -> VariantRow {
    VariantRow {
        variant: kind,
        eta,
        stability_score: None,
        stability_sd: None,
        calinski_harabasz: None,
        error: Some(e.to_string()),
    }
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_evaluations_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut s = String::from("step,kind,gamma,eta,L_s,L_p_raw,L_p,p_value,chi_square,L,error\n");
    for (i, r) in records.iter().enumerate() {
        let b = r.breakdown;
        writeln!(
            s,
            "{i},{},{},{},{},{},{},{},{},{},{}",
            r.kind.as_str(),
            r.theta.gamma,
            r.theta.eta,
            opt(b.map(|b| b.stability_loss)),
            opt(b.map(|b| b.significance_raw)),
            opt(b.map(|b| b.significance_oriented)),
            opt(b.map(|b| b.p_value)),
            opt(b.map(|b| b.chi_square)),
            opt(b.map(|b| b.loss)),
            csv_field(r.error.as_deref().unwrap_or(""))
        )
        .expect("write to string");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_variants_csv(rows: &[VariantRow], path: &Path) -> Result<()> {
    let mut s = String::from("variant,eta,stability_score,stability_sd,calinski_harabasz,error\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.variant.as_str(),
            r.eta,
            opt(r.stability_score),
            opt(r.stability_sd),
            opt(r.calinski_harabasz),
            csv_field(r.error.as_deref().unwrap_or(""))
        )
        .expect("write to string");
    }
    fs::write(path, s)?;
    Ok(())
}

/// CSV `patient_id,group` in cohort order.
pub fn write_groups_csv(cohort: &Cohort, groups: &[RiskGroup], path: &Path) -> Result<()> {
    if groups.len() != cohort.n_patients() {
        return Err(Error::DimensionMismatch {
            expected: cohort.n_patients(),
            found: groups.len(),
        });
    }
    let mut s = String::from("patient_id,group\n");
    for (scan, g) in cohort.scans.iter().zip(groups) {
        writeln!(s, "{},{}", csv_field(&scan.patient_id), g.as_str()).expect("write to string");
    }
    fs::write(path, s)?;
    Ok(())
}

pub(crate) fn label_file_name(patient_id: &str) -> String {
    let clean: String = patient_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{clean}.csv")
}

/// Writes every run artifact except the plots into `dir`.
pub fn write_run_dir(dir: &Path, cohort: &Cohort, exp: &Experiment) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&exp.config)?)?;
    exp.trace.write_csv(&dir.join(TRACE_FILE))?;
    write_evaluations_csv(&exp.evaluations, &dir.join(EVALUATIONS_FILE))?;
    if !exp.variants.is_empty() {
        write_variants_csv(&exp.variants, &dir.join(VARIANTS_FILE))?;
    }
    let fit = &exp.final_fit;
    fit.bundle.save(&dir.join("bundle"))?;
    let (high, low) = fit.grouping.curves(&cohort.survival)?;
    write_km_csv(&[("high", &high), ("low", &low)], Some(&fit.grouping.logrank), &dir.join(KM_TRAIN_FILE))?;
    write_feature_table(&fit.features, &dir.join(FEATURES_FILE))?;
    write_groups_csv(cohort, &fit.grouping.groups, &dir.join(GROUPS_TRAIN_FILE))?;
    let labels = dir.join("labels");
    fs::create_dir_all(&labels)?;
    for (scan, map) in cohort.scans.iter().zip(&fit.label_maps) {
        map.write_csv(&scan.pixel_coords, &labels.join(label_file_name(&scan.patient_id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayesopt::Bounds;
    use crate::cohort::{generate_synthetic, SynthSpec};

    fn tiny() -> PipelineConfig {
        let mut c = PipelineConfig {
            k_trials: 2,
            n_init: 1,
            max_iter: 50,
            variant_etas: vec![3, 4],
            ..PipelineConfig::default()
        };
        c.fae.epochs = 1;
        c.bo.n_initial = 3;
        c.bo.max_steps = 1;
        c.bo.n_candidates = 50;
        c.bo.bounds = Bounds {
            gamma: (0.8, 1.0),
            eta: (3, 4),
        };
        c
    }

    #[test]
    fn experiment_writes_a_complete_run_dir() {
        let (cohort, _) = generate_synthetic(&SynthSpec::planted(10, 3, (10, 10), 5)).unwrap();
        let mut seen = 0;
        let exp = run_experiment(&cohort, &tiny(), |_, _, _| seen += 1).unwrap();
        assert_eq!(seen, exp.trace.steps.len());
        assert_eq!(exp.evaluations.len(), exp.trace.steps.len());
        assert_eq!(exp.variants.len(), 8);
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), &cohort, &exp).unwrap();
        for f in [CONFIG_FILE, TRACE_FILE, EVALUATIONS_FILE, VARIANTS_FILE, KM_TRAIN_FILE, FEATURES_FILE, GROUPS_TRAIN_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        assert_eq!(fs::read_dir(dir.path().join("labels")).unwrap().count(), 10);
        let km = fs::read_to_string(dir.path().join(KM_TRAIN_FILE)).unwrap();
        assert!(km.starts_with("# chi_square="));
        let cfg: PipelineConfig =
            serde_json::from_str(&fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(cfg, tiny());
    }

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(label_file_name("P-01"), "P-01.csv");
        assert_eq!(label_file_name("../x y"), ".._x_y.csv");
    }

    #[test]
    fn sd_of_constant_is_zero() {
        assert_eq!(sample_sd(&[0.5, 0.5, 0.5]), 0.0);
        assert!((sample_sd(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
    }
}
