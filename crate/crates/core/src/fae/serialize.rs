//! Text weight file:
//!
//! ```text
//! fae-weights 1
//! variant <baseline|standard_ae|ensemble_ae|fae>
//! n_modalities <M>
//! hidden_width <H>
//! latent_dim <L>
//! n_params <P>
//! <P lines, one weight each>
//! ```
//!
//! Weights follow layer order. For the pairwise variants: per pair the
//! encoder hidden then output layer, the latent mixing layer, per pair the
//! projection, per pair the decoder hidden then output layer, and finally
//! the global decoder hidden then output layer. For the standard AE: encoder
//! hidden, encoder output, decoder hidden, decoder output. Each layer stores
//! its row-major `out × in` weights followed by its biases.

use std::fs;
use std::path::Path;

use super::model::FaeModel;
use super::{FaeConfig, FeatureTransformer, VariantKind};
use crate::error::{Error, Result};

const MAGIC: &str = "fae-weights 1";

pub fn write_transformer(t: &FeatureTransformer, path: &Path) -> Result<()> {
    let (hidden, latent, params): (usize, usize, &[f64]) = match t.network() {
        Some(n) => (n.hidden_width(), n.latent_dim(), n.params()),
        None => (t.config().hidden_width, t.n_modalities(), &[]),
    };
    let mut s = String::with_capacity(32 * params.len() + 128);
    s.push_str(MAGIC);
    s.push('\n');
    s.push_str(&format!("variant {}\n", t.kind()));
    s.push_str(&format!("n_modalities {}\n", t.n_modalities()));
    s.push_str(&format!("hidden_width {hidden}\n"));
    s.push_str(&format!("latent_dim {latent}\n"));
    s.push_str(&format!("n_params {}\n", params.len()));
    for v in params {
        s.push_str(&format!("{v:.16e}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a weight file. Training settings are not part of the file; the
/// returned transformer carries `config` for any further training.
pub fn read_transformer(path: &Path, config: &FaeConfig) -> Result<FeatureTransformer> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let err = |line: usize, reason: &str| Error::Parse {
        file: path.to_path_buf(),
        line: line as u64 + 1,
        reason: reason.to_string(),
    };
    let mut header = |key: &str| -> Result<String> {
        let (i, l) = lines.next().ok_or_else(|| err(0, "truncated header"))?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ => Err(err(i, &format!("expected `{key}`"))),
        }
    };
    if header("fae-weights")? != "1" {
        return Err(err(0, "unsupported weight file version"));
    }
    let kind: VariantKind = header("variant")?.parse()?;
    let num = |s: String, line: usize| s.parse::<usize>().map_err(|_| err(line, "expected an integer"));
    let m = num(header("n_modalities")?, 2)?;
    let hidden = num(header("hidden_width")?, 3)?;
    let latent = num(header("latent_dim")?, 4)?;
    let n = num(header("n_params")?, 5)?;
    let mut params = Vec::with_capacity(n);
    for (i, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        params.push(l.trim().parse::<f64>().map_err(|_| err(i, "non-numeric weight"))?);
    }
    if params.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: params.len(),
        });
    }
    let network = match kind {
        VariantKind::Baseline => None,
        _ => Some(FaeModel::from_parts(kind, m, hidden, latent, params)?),
    };
    let config = FaeConfig {
        n_modalities: m,
        hidden_width: hidden,
        latent_dim: latent,
        ..config.clone()
    };
    Ok(FeatureTransformer::from_network(kind, m, network, config))
}
