//! The per-θ objective (filter, scale, encode, stability trials, final
//! segmentation, texture features, risk groups, log-rank significance),
//! final model fitting, holdout application and full experiment runs.

mod bundle;
mod experiment;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayesopt::{BoSettings, HyperParams};
use crate::clustering::{
    kmeans_fit, stability_loss, ClusterModel, LabelMap, StabilityOutcome, StabilitySettings, DEFAULT_MAX_ITER,
    DEFAULT_N_INIT,
};
use crate::cohort::{quantile_filter_with_bounds, standardize, ClipBounds, Cohort, ModalityStats};
use crate::error::{Error, Result, StageExt};
use crate::fae::{build_variant, FaeConfig, FeatureTransformer, VariantKind};
use crate::matrix::Matrix;
use crate::seed;
use crate::survival::{risk_grouping, significance_loss, LogRankResult, RiskGrouping, DEFAULT_TAU};
use crate::texture::{extract_features, PatientFeatureVector};

pub use bundle::{apply_bundle, Application, ModelBundle, BUNDLE_FILE, WEIGHTS_FILE};
pub use experiment::{
    bo_settings, compare_variants, run_experiment, write_evaluations_csv, write_groups_csv, write_run_dir,
    write_variants_csv, EvalRecord, Experiment, VariantRow, CONFIG_FILE, EVALUATIONS_FILE, FEATURES_FILE,
    GROUPS_TEST_FILE, GROUPS_TRAIN_FILE, KM_TEST_FILE, KM_TRAIN_FILE, TRACE_FILE, VARIANTS_FILE,
};

/// p-values are kept strictly inside (0, 1) before entering the
/// significance loss; the reported p is left untouched.
const P_FLOOR: f64 = f64::MIN_POSITIVE;
const P_CEIL: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Weight of the stability loss in the joint loss.
    pub alpha: f64,
    pub tau: f64,
    pub k_trials: usize,
    pub variant: VariantKind,
    /// `n_modalities` and `seed` are taken from the cohort and the master
    /// seed; a `latent_dim` of 0 means one latent unit per modality.
    pub fae: FaeConfig,
    pub n_init: usize,
    pub max_iter: usize,
    /// Share of patients in the training part of each stability split.
    pub split_fraction: f64,
    pub bo: BoSettings,
    /// Master seed; every stochastic stage derives its own stream from it.
    pub seed: u64,
    /// Train a fresh transformer on every stability split instead of
    /// re-encoding with the one trained on the full cohort.
    pub retrain_per_split: bool,
    pub compare_variants: bool,
    pub variant_etas: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            alpha: 0.5,
            tau: DEFAULT_TAU,
            k_trials: 10,
            variant: VariantKind::Fae,
            fae: FaeConfig {
                latent_dim: 0,
                ..FaeConfig::default()
            },
            n_init: DEFAULT_N_INIT,
            max_iter: DEFAULT_MAX_ITER,
            split_fraction: 57.0 / 82.0,
            bo: BoSettings::default(),
            seed: 0,
            retrain_per_split: false,
            compare_variants: true,
            variant_etas: vec![3, 4, 5, 6],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.k_trials == 0 {
            return Err(Error::invalid("k_trials must be at least 1"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::invalid("split_fraction must lie in (0, 1)"));
        }
        if self.n_init == 0 || self.max_iter == 0 {
            return Err(Error::invalid("n_init and max_iter must be positive"));
        }
        if let Some(&e) = self.variant_etas.iter().find(|&&e| e < 2) {
            return Err(Error::invalid(format!("variant_etas entries must be at least 2, got {e}")));
        }
        self.bo.validate()
    }

    /// Transformer settings for an `m`-modality cohort, seeded from the
    /// master seed under `tag`/`index`.
    pub fn fae_config(&self, m: usize, tag: &str, index: u64) -> FaeConfig {
        FaeConfig {
            n_modalities: m,
            latent_dim: if self.fae.latent_dim == 0 { m } else { self.fae.latent_dim },
            seed: seed::derive(self.seed, tag, index),
            ..self.fae.clone()
        }
    }

    fn stability_settings(&self, eta: usize, stream: u64) -> StabilitySettings {
        StabilitySettings {
            eta,
            k_trials: self.k_trials,
            fraction: self.split_fraction,
            n_init: self.n_init,
            max_iter: self.max_iter,
            seed: seed::derive(self.seed, "stability", stream),
        }
    }
}

/// Joint loss and its parts for one θ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stability_loss: f64,
    pub significance_raw: f64,
    pub significance_oriented: f64,
    pub p_value: f64,
    pub chi_square: f64,
    /// `alpha * stability_loss + (1 - alpha) * significance_oriented`
    pub loss: f64,
}

impl LossBreakdown {
    pub fn stability_score(&self) -> f64 {
        1.0 - self.stability_loss
    }
}

pub fn joint_loss(alpha: f64, stability: f64, significance_oriented: f64) -> f64 {
    alpha * stability + (1.0 - alpha) * significance_oriented
}

/// Filtered, standardized cohort with its trained transformer and latents.
pub(crate) struct Prepared {
    pub cohort: Cohort,
    pub clip_bounds: ClipBounds,
    pub stats: ModalityStats,
    pub transformer: FeatureTransformer,
    pub latents: Matrix,
}

pub(crate) fn prepare(cohort: &Cohort, gamma: f64, kind: VariantKind, fae: &FaeConfig) -> Result<Prepared> {
    let (filtered, clip_bounds) = quantile_filter_with_bounds(cohort, gamma).stage("quantile_filter")?;
    let (scaled, stats) = standardize(&filtered).stage("standardize")?;
    let pixels = scaled.pooled_pixels();
    let mut transformer = build_variant(kind, fae).stage("train_transformer")?;
    transformer.train(&pixels).stage("train_transformer")?;
    let latents = transformer.encode(&pixels).stage("encode")?;
    Ok(Prepared {
        cohort: scaled,
        clip_bounds,
        stats,
        transformer,
        latents,
    })
}

/// Stability trials on a prepared cohort.
pub(crate) fn stability_for(prep: &Prepared, kind: VariantKind, settings: &StabilitySettings, config: &PipelineConfig) -> Result<StabilityOutcome> {
    let m = prep.cohort.n_modalities();
    let shared = |tr: &Cohort, va: &Cohort, _k: usize| -> Result<(Matrix, Matrix)> {
        Ok((
            prep.transformer.encode(&tr.pooled_pixels())?,
            prep.transformer.encode(&va.pooled_pixels())?,
        ))
    };
    let retrain = |tr: &Cohort, va: &Cohort, k: usize| -> Result<(Matrix, Matrix)> {
        let mut t = build_variant(kind, &config.fae_config(m, "fae-split", k as u64))?;
        t.train(&tr.pooled_pixels())?;
        Ok((t.encode(&tr.pooled_pixels())?, t.encode(&va.pooled_pixels())?))
    };
    if config.retrain_per_split {
        stability_loss(&retrain, &prep.cohort, settings)
    } else {
        stability_loss(&shared, &prep.cohort, settings)
    }
}

/// Splits pooled labels back into per-patient maps.
pub(crate) fn label_maps(cohort: &Cohort, labels: &[usize], eta: usize) -> Result<Vec<LabelMap>> {
    let offsets = cohort.pixel_offsets();
    cohort
        .scans
        .iter()
        .enumerate()
        .map(|(i, s)| LabelMap::new(s.patient_id.clone(), labels[offsets[i]..offsets[i + 1]].to_vec(), eta))
        .collect()
}

pub(crate) fn patient_features(cohort: &Cohort, maps: &[LabelMap]) -> Result<Vec<PatientFeatureVector>> {
    cohort
        .scans
        .par_iter()
        .zip(maps.par_iter())
        .map(|(s, m)| extract_features(m, &s.pixel_coords, s.image_dims))
        .collect()
}

pub(crate) fn segment(prep: &Prepared, eta: usize, config: &PipelineConfig) -> Result<(ClusterModel, Vec<LabelMap>)> {
    let model = kmeans_fit(
        &prep.latents,
        eta,
        seed::derive(config.seed, "final-kmeans", 0),
        config.n_init,
        config.max_iter,
    )
    .stage("cluster")?;
    let labels = model.predict(&prep.latents).stage("cluster")?;
    let maps = label_maps(&prep.cohort, &labels, eta).stage("cluster")?;
    Ok((model, maps))
}

pub(crate) fn breakdown(stability: f64, logrank: &LogRankResult, config: &PipelineConfig) -> Result<LossBreakdown> {
    let p = logrank.p_value.clamp(P_FLOOR, P_CEIL);
    let sig = significance_loss(p, config.tau).stage("significance")?;
    Ok(LossBreakdown {
        stability_loss: stability,
        significance_raw: sig.raw,
        significance_oriented: sig.oriented,
        p_value: logrank.p_value,
        chi_square: logrank.chi_square,
        loss: joint_loss(config.alpha, stability, sig.oriented),
    })
}

fn check_theta(cohort: &Cohort, theta: &HyperParams, config: &PipelineConfig) -> Result<()> {
    config.validate()?;
    if cohort.n_patients() == 0 {
        return Err(Error::EmptyCohort);
    }
    if !config.bo.bounds.contains(theta) {
        return Err(Error::invalid(format!("{theta} outside the search bounds")));
    }
    Ok(())
}

/// Everything one objective evaluation produces.
pub struct ThetaOutcome {
    pub breakdown: LossBreakdown,
    pub stability: StabilityOutcome,
    pub grouping: RiskGrouping,
}

pub fn evaluate_theta_detailed(cohort: &Cohort, theta: &HyperParams, config: &PipelineConfig) -> Result<ThetaOutcome> {
    check_theta(cohort, theta, config)?;
    let fae = config.fae_config(cohort.n_modalities(), "fae", 0);
    let prep = prepare(cohort, theta.gamma, config.variant, &fae)?;
    let stability = stability_for(&prep, config.variant, &config.stability_settings(theta.eta, 0), config).stage("stability")?;
    let (_, maps) = segment(&prep, theta.eta, config)?;
    let features = patient_features(&prep.cohort, &maps).stage("texture")?;
    let grouping = risk_grouping(&features, &prep.cohort.survival).stage("risk_grouping")?;
    let breakdown = breakdown(stability.loss, &grouping.logrank, config)?;
    Ok(ThetaOutcome {
        breakdown,
        stability,
        grouping,
    })
}

/// The black-box objective: joint loss of one θ. Deterministic given the
/// cohort, θ and the config's master seed; never mutates the cohort.
pub fn evaluate_theta(cohort: &Cohort, theta: &HyperParams, config: &PipelineConfig) -> Result<LossBreakdown> {
    evaluate_theta_detailed(cohort, theta, config).map(|o| o.breakdown)
}

/// Final models at θ and the training-cohort outputs they produce.
pub struct FinalFit {
    pub bundle: ModelBundle,
    pub label_maps: Vec<LabelMap>,
    pub features: Vec<PatientFeatureVector>,
    pub grouping: RiskGrouping,
}

/// Refits transformer, pixel clustering and risk medoids on the whole
/// cohort at θ. Uses the same seed streams as [`evaluate_theta`].
pub fn fit_final(cohort: &Cohort, theta: &HyperParams, config: &PipelineConfig) -> Result<FinalFit> {
    check_theta(cohort, theta, config)?;
    let fae = config.fae_config(cohort.n_modalities(), "fae", 0);
    let prep = prepare(cohort, theta.gamma, config.variant, &fae)?;
    let (cluster_model, maps) = segment(&prep, theta.eta, config)?;
    let features = patient_features(&prep.cohort, &maps).stage("texture")?;
    let grouping = risk_grouping(&features, &prep.cohort.survival).stage("risk_grouping")?;
    let bundle = ModelBundle {
        theta: *theta,
        modality_names: cohort.modality_names.clone(),
        clip_bounds: prep.clip_bounds,
        modality_stats: prep.stats,
        transformer: prep.transformer,
        cluster_model,
        risk_model: grouping.model.clone(),
    };
    Ok(FinalFit {
        bundle,
        label_maps: maps,
        features,
        grouping,
    })
}
