//! Feature-enhanced auto-encoder and the comparison variants.
//!
//! The FAE encodes every modality pair `(x_i, x_j)` with its own small tanh
//! network into a scalar `e_w`, mixes the `W = M(M-1)/2` pair codes into an
//! `M`-node latent layer `z`, and projects `z` back to one scalar `d_w` per
//! pair. Two decoding paths hang off the `d_w`: one decoder per pair that
//! reconstructs `(x_i, x_j)`, and a global decoder `D_s` that reconstructs
//! the full pixel vector from all `d_w` together. Training alternates one
//! Adam step on the pairwise loss and one on the global loss per minibatch.
//!
//! Variants used for comparison:
//! - `baseline`: identity features.
//! - `standard_ae`: `M → 10 → M → 10 → M` autoencoder on all modalities.
//! - `ensemble_ae`: the FAE without `D_s`, trained on the pairwise loss only.

mod gradcheck;
mod layers;
mod model;
mod serialize;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use layers::ParamGroup;
pub use model::{modality_pairs, FaeModel, ForwardOutput, LossKind};
pub use serialize::{read_transformer, write_transformer};
pub use train::{train, LossTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Baseline,
    StandardAe,
    EnsembleAe,
    Fae,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Baseline,
        VariantKind::StandardAe,
        VariantKind::EnsembleAe,
        VariantKind::Fae,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Baseline => "baseline",
            VariantKind::StandardAe => "standard_ae",
            VariantKind::EnsembleAe => "ensemble_ae",
            VariantKind::Fae => "fae",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaeConfig {
    pub n_modalities: usize,
    pub hidden_width: usize,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl FaeConfig {
    pub fn new(n_modalities: usize) -> Self {
        FaeConfig {
            n_modalities,
            hidden_width: 10,
            latent_dim: n_modalities,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            epochs: 100,
            batch_size: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_modalities < 2 {
            return Err(Error::invalid("the network needs at least two modalities"));
        }
        if self.latent_dim == 0 || self.latent_dim > self.n_modalities {
            return Err(Error::invalid(format!(
                "latent_dim must lie in [1, {}], got {}",
                self.n_modalities, self.latent_dim
            )));
        }
        if self.hidden_width == 0 || self.batch_size == 0 {
            return Err(Error::invalid("hidden_width and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

impl Default for FaeConfig {
    fn default() -> Self {
        FaeConfig::new(3)
    }
}

/// Uniform train/encode surface over the four variants.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTransformer {
    kind: VariantKind,
    n_modalities: usize,
    network: Option<FaeModel>,
    config: FaeConfig,
}

impl FeatureTransformer {
    pub fn kind(&self) -> VariantKind {
        self.kind
    }

    pub fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    pub fn output_dim(&self) -> usize {
        self.network.as_ref().map_or(self.n_modalities, FaeModel::latent_dim)
    }

    pub fn network(&self) -> Option<&FaeModel> {
        self.network.as_ref()
    }

    pub fn config(&self) -> &FaeConfig {
        &self.config
    }

    pub(crate) fn from_network(kind: VariantKind, n_modalities: usize, network: Option<FaeModel>, config: FaeConfig) -> Self {
        FeatureTransformer {
            kind,
            n_modalities,
            network,
            config,
        }
    }

    /// Trains in place. The baseline has nothing to train and returns an empty trace.
    pub fn train(&mut self, pixels: &Matrix) -> Result<LossTrace> {
        match self.network.as_mut() {
            None => Ok(LossTrace::default()),
            Some(net) => {
                let (trained, trace) = train::train(net, pixels, &self.config)?;
                *net = trained;
                Ok(trace)
            }
        }
    }

    pub fn encode(&self, pixels: &Matrix) -> Result<Matrix> {
        if pixels.cols() != self.n_modalities && pixels.rows() > 0 {
            return Err(Error::DimensionMismatch {
                expected: self.n_modalities,
                found: pixels.cols(),
            });
        }
        match &self.network {
            None => Ok(pixels.clone()),
            Some(net) => net.encode(pixels),
        }
    }
}

/// Builds an untrained transformer of the given kind.
pub fn build_variant(kind: VariantKind, config: &FaeConfig) -> Result<FeatureTransformer> {
    config.validate()?;
    let network = match kind {
        VariantKind::Baseline => None,
        _ => Some(FaeModel::init(kind, config)?),
    };
    Ok(FeatureTransformer {
        kind,
        n_modalities: config.n_modalities,
        network,
        config: config.clone(),
    })
}
