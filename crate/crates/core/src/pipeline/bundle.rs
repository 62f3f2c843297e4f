use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{label_maps, patient_features};
use crate::bayesopt::HyperParams;
use crate::clustering::{ClusterModel, LabelMap};
use crate::cohort::{ClipBounds, Cohort, ModalityStats};
use crate::error::{Error, Result, StageExt};
use crate::fae::{read_transformer, write_transformer, FaeConfig, FeatureTransformer, VariantKind};
use crate::survival::{logrank_test, LogRankResult, RiskGroup, RiskModel};
use crate::texture::PatientFeatureVector;

pub const BUNDLE_FILE: &str = "bundle.json";
pub const WEIGHTS_FILE: &str = "transformer.txt";

/// Everything needed to segment and risk-stratify unseen patients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub theta: HyperParams,
    pub modality_names: Vec<String>,
    pub clip_bounds: ClipBounds,
    pub modality_stats: ModalityStats,
    pub transformer: FeatureTransformer,
    pub cluster_model: ClusterModel,
    pub risk_model: RiskModel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    theta: HyperParams,
    modality_names: Vec<String>,
    clip_bounds: ClipBounds,
    modality_stats: ModalityStats,
    variant: VariantKind,
    fae: FaeConfig,
    cluster_model: ClusterModel,
    risk_model: RiskModel,
}

impl ModelBundle {
    /// Writes `bundle.json` and the transformer weights into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let file = BundleFile {
            theta: self.theta,
            modality_names: self.modality_names.clone(),
            clip_bounds: self.clip_bounds.clone(),
            modality_stats: self.modality_stats.clone(),
            variant: self.transformer.kind(),
            fae: self.transformer.config().clone(),
            cluster_model: self.cluster_model.clone(),
            risk_model: self.risk_model.clone(),
        };
        fs::write(dir.join(BUNDLE_FILE), serde_json::to_string_pretty(&file)?)?;
        write_transformer(&self.transformer, &dir.join(WEIGHTS_FILE))
    }

    pub fn load(dir: &Path) -> Result<ModelBundle> {
        let path = dir.join(BUNDLE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::invalid(format!("no bundle at {}", dir.display())),
            _ => Error::Io(e),
        })?;
        let file: BundleFile = serde_json::from_str(&text)?;
        let transformer = read_transformer(&dir.join(WEIGHTS_FILE), &file.fae)?;
        if transformer.kind() != file.variant {
            return Err(Error::invalid("transformer variant does not match bundle.json"));
        }
        let m = file.modality_names.len();
        if transformer.n_modalities() != m || file.clip_bounds.lower.len() != m || file.modality_stats.mean.len() != m {
            return Err(Error::invalid("bundle components disagree on the modality count"));
        }
        if file.cluster_model.centroids.cols() != transformer.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: transformer.output_dim(),
                found: file.cluster_model.centroids.cols(),
            });
        }
        Ok(ModelBundle {
            theta: file.theta,
            modality_names: file.modality_names,
            clip_bounds: file.clip_bounds,
            modality_stats: file.modality_stats,
            transformer,
            cluster_model: file.cluster_model,
            risk_model: file.risk_model,
        })
    }
}

/// Outputs of a bundle applied to a holdout cohort.
#[derive(Debug, Clone)]
pub struct Application {
    pub label_maps: Vec<LabelMap>,
    pub features: Vec<PatientFeatureVector>,
    pub groups: Vec<RiskGroup>,
    /// `None` when one group is empty or carries no events.
    pub logrank: Option<LogRankResult>,
}

impl Application {
    /// Survival records split as (high, low).
    pub fn partition<'a>(&self, cohort: &'a Cohort) -> (Vec<&'a crate::cohort::SurvivalRecord>, Vec<&'a crate::cohort::SurvivalRecord>) {
        let mut high = Vec::new();
        let mut low = Vec::new();
        for (r, g) in cohort.survival.iter().zip(&self.groups) {
            match g {
                RiskGroup::High => high.push(r),
                RiskGroup::Low => low.push(r),
            }
        }
        (high, low)
    }
}

/// Applies stored bounds, statistics, transformer, centroids and risk
/// medoids to `holdout`. Nothing is refit.
pub fn apply_bundle(bundle: &ModelBundle, holdout: &Cohort) -> Result<Application> {
    let m = bundle.modality_names.len();
    if holdout.n_modalities() != m {
        return Err(Error::ModalityMismatch {
            expected: m,
            found: holdout.n_modalities(),
        });
    }
    if holdout.modality_names != bundle.modality_names {
        return Err(Error::invalid(format!(
            "modality names {:?} do not match the bundle's {:?}",
            holdout.modality_names, bundle.modality_names
        )));
    }
    if holdout.n_patients() == 0 {
        return Err(Error::EmptyCohort);
    }
    let clipped = bundle.clip_bounds.apply(holdout).stage("quantile_filter")?;
    let scaled = bundle.modality_stats.apply(&clipped).stage("standardize")?;
    let latents = bundle.transformer.encode(&scaled.pooled_pixels()).stage("encode")?;
    let labels = bundle.cluster_model.predict(&latents).stage("cluster")?;
    let maps = label_maps(&scaled, &labels, bundle.cluster_model.eta).stage("cluster")?;
    let features = patient_features(&scaled, &maps).stage("texture")?;
    let groups = bundle.risk_model.assign(&features).stage("risk_grouping")?;
    let app = Application {
        label_maps: maps,
        features,
        groups,
        logrank: None,
    };
    let (high, low) = app.partition(holdout);
    let high: Vec<_> = high.into_iter().cloned().collect();
    let low: Vec<_> = low.into_iter().cloned().collect();
    let logrank = match logrank_test(&high, &low) {
        Ok(lr) => Some(lr),
        Err(Error::Degenerate(_)) | Err(Error::InvalidInput(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Application { logrank, ..app })
}
