use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Dense, LayoutBuilder, ParamGroup};
use super::{FaeConfig, VariantKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

/// Modality index pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn modality_pairs(m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            out.push((i, j));
        }
    }
    out
}

#[derive(Debug, Clone)]
struct PairLayers {
    enc_hidden: Dense,
    enc_out: Dense,
    proj: Dense,
    dec_hidden: Dense,
    dec_out: Dense,
}

#[derive(Debug, Clone)]
enum Layout {
    /// Pairwise encoders, latent mixing, per-pair projections and pair
    /// decoders, plus the global decoder when `global` is set.
    Pairwise {
        pairs: Vec<(usize, usize)>,
        per_pair: Vec<PairLayers>,
        mix: Dense,
        global: Option<(Dense, Dense)>,
    },
    /// `M → H → latent → H → M`.
    Dense {
        enc_hidden: Dense,
        enc_out: Dense,
        dec_hidden: Dense,
        dec_out: Dense,
    },
}

/// Which reconstruction loss a computation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Pairwise,
    Global,
}

/// Trainable network behind the `standard_ae`, `ensemble_ae` and `fae`
/// variants. All parameters live in one flat buffer; the layout is derived
/// from the dimensions and the variant.
#[derive(Debug, Clone)]
pub struct FaeModel {
    kind: VariantKind,
    n_modalities: usize,
    hidden_width: usize,
    latent_dim: usize,
    params: Vec<f64>,
    layout: Layout,
    all_layers: Vec<Dense>,
}

impl PartialEq for FaeModel {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.n_modalities == other.n_modalities
            && self.hidden_width == other.hidden_width
            && self.latent_dim == other.latent_dim
            && self.params == other.params
    }
}

/// Output of a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub z: Vec<f64>,
    /// Empty for the standard autoencoder.
    pub pairwise_recon: Vec<[f64; 2]>,
    /// Empty for the ensemble autoencoder.
    pub global_recon: Vec<f64>,
}

/// Intermediate activations of one sample, reused across samples.
#[derive(Debug, Clone)]
struct Trace {
    enc_h: Vec<f64>,
    e: Vec<f64>,
    z: Vec<f64>,
    d: Vec<f64>,
    dec_h: Vec<f64>,
    r: Vec<f64>,
    ds_h: Vec<f64>,
    xg: Vec<f64>,
}

impl FaeModel {
    fn build_layout(kind: VariantKind, m: usize, h: usize, l: usize) -> (Layout, Vec<Dense>, usize) {
        use Activation::{Linear, Tanh};
        let mut lb = LayoutBuilder::default();
        let layout = match kind {
            VariantKind::StandardAe => Layout::Dense {
                enc_hidden: lb.dense(m, h, Tanh, ParamGroup::Encoder),
                enc_out: lb.dense(h, l, Tanh, ParamGroup::Encoder),
                dec_hidden: lb.dense(l, h, Tanh, ParamGroup::GlobalDecoder),
                dec_out: lb.dense(h, m, Linear, ParamGroup::GlobalDecoder),
            },
            VariantKind::EnsembleAe | VariantKind::Fae => {
                let pairs = modality_pairs(m);
                let w = pairs.len();
                let enc: Vec<(Dense, Dense)> = (0..w)
                    .map(|_| {
                        (
                            lb.dense(2, h, Tanh, ParamGroup::Encoder),
                            lb.dense(h, 1, Tanh, ParamGroup::Encoder),
                        )
                    })
                    .collect();
                let mix = lb.dense(w, l, Tanh, ParamGroup::Mixing);
                let proj: Vec<Dense> = (0..w).map(|_| lb.dense(l, 1, Tanh, ParamGroup::Projection)).collect();
                let dec: Vec<(Dense, Dense)> = (0..w)
                    .map(|_| {
                        (
                            lb.dense(1, h, Tanh, ParamGroup::PairDecoder),
                            lb.dense(h, 2, Linear, ParamGroup::PairDecoder),
                        )
                    })
                    .collect();
                let global = (kind == VariantKind::Fae).then(|| {
                    (
                        lb.dense(w, h, Tanh, ParamGroup::GlobalDecoder),
                        lb.dense(h, m, Linear, ParamGroup::GlobalDecoder),
                    )
                });
                let per_pair = (0..w)
                    .map(|k| PairLayers {
                        enc_hidden: enc[k].0,
                        enc_out: enc[k].1,
                        proj: proj[k],
                        dec_hidden: dec[k].0,
                        dec_out: dec[k].1,
                    })
                    .collect();
                Layout::Pairwise {
                    pairs,
                    per_pair,
                    mix,
                    global,
                }
            }
            VariantKind::Baseline => unreachable!("baseline has no network"),
        };
        let n = lb.len();
        (layout, lb.layers, n)
    }

    /// Zero-initialized model.
    pub fn zeros(kind: VariantKind, n_modalities: usize, hidden_width: usize, latent_dim: usize) -> Result<Self> {
        if kind == VariantKind::Baseline {
            return Err(Error::invalid("the baseline variant has no network"));
        }
        if n_modalities < 2 || hidden_width == 0 || latent_dim == 0 || latent_dim > n_modalities {
            return Err(Error::invalid(format!(
                "invalid network dims: M={n_modalities}, hidden={hidden_width}, latent={latent_dim}"
            )));
        }
        let (layout, all_layers, n) = Self::build_layout(kind, n_modalities, hidden_width, latent_dim);
        Ok(FaeModel {
            kind,
            n_modalities,
            hidden_width,
            latent_dim,
            params: vec![0.0; n],
            layout,
            all_layers,
        })
    }

    /// Glorot-uniform weights, zero biases, deterministic in `config.seed`.
    pub fn init(kind: VariantKind, config: &FaeConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Self::zeros(kind, config.n_modalities, config.hidden_width, config.latent_dim)?;
        let mut rng = seed::derived_rng(config.seed, "fae-init", 0);
        for layer in model.all_layers.clone() {
            let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            for v in &mut model.params[layer.w..layer.b] {
                *v = rng.random_range(-limit..=limit);
            }
        }
        Ok(model)
    }

    pub fn kind(&self) -> VariantKind {
        self.kind
    }

    pub fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Number of pairwise encoder/decoder branches (zero for the standard AE).
    pub fn n_pairs(&self) -> usize {
        match &self.layout {
            Layout::Pairwise { pairs, .. } => pairs.len(),
            Layout::Dense { .. } => 0,
        }
    }

    pub fn has_global_decoder(&self) -> bool {
        match &self.layout {
            Layout::Pairwise { global, .. } => global.is_some(),
            Layout::Dense { .. } => true,
        }
    }

    pub fn has_pairwise_decoders(&self) -> bool {
        matches!(self.layout, Layout::Pairwise { .. })
    }

    pub fn supports(&self, loss: LossKind) -> bool {
        match loss {
            LossKind::Pairwise => self.has_pairwise_decoders(),
            LossKind::Global => self.has_global_decoder(),
        }
    }

    /// Number of parameters belonging to `group`.
    pub fn group_size(&self, group: ParamGroup) -> usize {
        self.all_layers.iter().filter(|l| l.group == group).map(Dense::n_params).sum()
    }

    /// Per-parameter mask of the parameters updated when optimizing `loss`.
    pub(crate) fn update_mask(&self, loss: LossKind) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for layer in &self.all_layers {
            let on = match (loss, layer.group) {
                (_, ParamGroup::Encoder | ParamGroup::Mixing | ParamGroup::Projection) => true,
                (LossKind::Pairwise, ParamGroup::PairDecoder) => true,
                (LossKind::Global, ParamGroup::GlobalDecoder) => true,
                _ => false,
            };
            mask[layer.w..layer.w + layer.n_params()].fill(on);
        }
        mask
    }

    fn new_trace(&self) -> Trace {
        let (h, l, m, w) = (self.hidden_width, self.latent_dim, self.n_modalities, self.n_pairs());
        match self.layout {
            Layout::Pairwise { .. } => Trace {
                enc_h: vec![0.0; w * h],
                e: vec![0.0; w],
                z: vec![0.0; l],
                d: vec![0.0; w],
                dec_h: vec![0.0; w * h],
                r: vec![0.0; w * 2],
                ds_h: vec![0.0; h],
                xg: vec![0.0; m],
            },
            Layout::Dense { .. } => Trace {
                enc_h: vec![0.0; h],
                e: Vec::new(),
                z: vec![0.0; l],
                d: Vec::new(),
                dec_h: vec![0.0; h],
                r: Vec::new(),
                ds_h: Vec::new(),
                xg: vec![0.0; m],
            },
        }
    }

    /// Runs the encoder only (and nothing downstream of `z`).
    fn encode_into(&self, x: &[f64], t: &mut Trace) {
        let p = &self.params;
        let h = self.hidden_width;
        match &self.layout {
            Layout::Pairwise { pairs, per_pair, mix, .. } => {
                for (k, (&(i, j), layers)) in pairs.iter().zip(per_pair).enumerate() {
                    let hk = &mut t.enc_h[k * h..(k + 1) * h];
                    layers.enc_hidden.forward(p, &[x[i], x[j]], hk);
                    layers.enc_out.forward(p, hk, &mut t.e[k..k + 1]);
                }
                mix.forward(p, &t.e, &mut t.z);
            }
            Layout::Dense { enc_hidden, enc_out, .. } => {
                enc_hidden.forward(p, x, &mut t.enc_h);
                enc_out.forward(p, &t.enc_h, &mut t.z);
            }
        }
    }

    fn forward_into(&self, x: &[f64], t: &mut Trace) {
        self.encode_into(x, t);
        let p = &self.params;
        let h = self.hidden_width;
        match &self.layout {
            Layout::Pairwise { per_pair, global, .. } => {
                for (k, layers) in per_pair.iter().enumerate() {
                    layers.proj.forward(p, &t.z, &mut t.d[k..k + 1]);
                    let gk = &mut t.dec_h[k * h..(k + 1) * h];
                    layers.dec_hidden.forward(p, &t.d[k..k + 1], gk);
                    layers.dec_out.forward(p, gk, &mut t.r[k * 2..k * 2 + 2]);
                }
                if let Some((ds_hidden, ds_out)) = global {
                    ds_hidden.forward(p, &t.d, &mut t.ds_h);
                    ds_out.forward(p, &t.ds_h, &mut t.xg);
                }
            }
            Layout::Dense { dec_hidden, dec_out, .. } => {
                dec_hidden.forward(p, &t.z, &mut t.dec_h);
                dec_out.forward(p, &t.dec_h, &mut t.xg);
            }
        }
    }

    fn check_row(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_modalities {
            return Err(Error::DimensionMismatch {
                expected: self.n_modalities,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite input to network"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardOutput> {
        self.check_row(x)?;
        let mut t = self.new_trace();
        self.forward_into(x, &mut t);
        let pairwise_recon = t.r.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let global_recon = if self.has_global_decoder() { t.xg } else { Vec::new() };
        Ok(ForwardOutput {
            z: t.z,
            pairwise_recon,
            global_recon,
        })
    }

    /// Latent codes for every row. Rows are processed independently.
    pub fn encode(&self, pixels: &Matrix) -> Result<Matrix> {
        use rayon::prelude::*;
        if pixels.cols() != self.n_modalities && pixels.rows() > 0 {
            return Err(Error::DimensionMismatch {
                expected: self.n_modalities,
                found: pixels.cols(),
            });
        }
        let l = self.latent_dim;
        let mut out = vec![0.0; pixels.rows() * l];
        out.par_chunks_mut(l * 1024)
            .enumerate()
            .for_each(|(chunk, dst)| {
                let mut t = self.new_trace();
                for (k, z) in dst.chunks_exact_mut(l).enumerate() {
                    self.encode_into(pixels.row(chunk * 1024 + k), &mut t);
                    z.copy_from_slice(&t.z);
                }
            });
        Matrix::from_vec(pixels.rows(), l, out)
    }

    fn sample_loss(&self, x: &[f64], t: &Trace, loss: LossKind) -> f64 {
        match loss {
            LossKind::Pairwise => match &self.layout {
                Layout::Pairwise { pairs, .. } => pairs
                    .iter()
                    .enumerate()
                    .map(|(k, &(i, j))| {
                        let (a, b) = (t.r[2 * k] - x[i], t.r[2 * k + 1] - x[j]);
                        a * a + b * b
                    })
                    .sum(),
                Layout::Dense { .. } => 0.0,
            },
            LossKind::Global => t.xg.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(),
        }
    }

    fn loss_normalizer(&self, n_rows: usize, loss: LossKind) -> f64 {
        match loss {
            LossKind::Pairwise => (n_rows * self.n_pairs() * 2) as f64,
            LossKind::Global => (n_rows * self.n_modalities) as f64,
        }
    }

    fn require(&self, loss: LossKind) -> Result<()> {
        if self.supports(loss) {
            Ok(())
        } else {
            Err(Error::invalid(format!("{} has no {loss:?} reconstruction", self.kind)))
        }
    }

    /// Mean squared reconstruction error over the batch for one loss.
    pub fn loss(&self, batch: &Matrix, loss: LossKind) -> Result<f64> {
        self.require(loss)?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut t = self.new_trace();
        let mut total = 0.0;
        for x in batch.iter_rows() {
            self.check_row(x)?;
            self.forward_into(x, &mut t);
            total += self.sample_loss(x, &t, loss);
        }
        Ok(total / self.loss_normalizer(batch.rows(), loss))
    }

    /// Loss and its gradient over the rows `idx` of `data`.
    pub(crate) fn loss_and_grad(&self, data: &Matrix, idx: &[usize], loss: LossKind, grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let scale = 1.0 / self.loss_normalizer(idx.len(), loss);
        let mut t = self.new_trace();
        let mut total = 0.0;
        let mut scratch = Scratch::new(self);
        for &i in idx {
            let x = data.row(i);
            self.forward_into(x, &mut t);
            total += self.sample_loss(x, &t, loss);
            self.backward(x, &t, loss, 2.0 * scale, grad, &mut scratch);
        }
        total * scale
    }

    /// Full-batch gradient of one loss.
    pub fn gradient(&self, batch: &Matrix, loss: LossKind) -> Result<(f64, Vec<f64>)> {
        self.require(loss)?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for x in batch.iter_rows() {
            self.check_row(x)?;
        }
        let idx: Vec<usize> = (0..batch.rows()).collect();
        let mut grad = vec![0.0; self.params.len()];
        let l = self.loss_and_grad(batch, &idx, loss, &mut grad);
        Ok((l, grad))
    }

    fn backward(&self, x: &[f64], t: &Trace, loss: LossKind, c: f64, grad: &mut [f64], s: &mut Scratch) {
        let p = &self.params;
        let h = self.hidden_width;
        match &self.layout {
            Layout::Pairwise {
                pairs,
                per_pair,
                mix,
                global,
            } => {
                s.dd.fill(0.0);
                match loss {
                    LossKind::Pairwise => {
                        for (k, (&(i, j), layers)) in pairs.iter().zip(per_pair).enumerate() {
                            let mut dr = [c * (t.r[2 * k] - x[i]), c * (t.r[2 * k + 1] - x[j])];
                            let gk = &t.dec_h[k * h..(k + 1) * h];
                            s.dh.fill(0.0);
                            layers.dec_out.backward(p, gk, &t.r[2 * k..2 * k + 2], &mut dr, grad, Some(&mut s.dh));
                            layers.dec_hidden.backward(
                                p,
                                &t.d[k..k + 1],
                                gk,
                                &mut s.dh,
                                grad,
                                Some(&mut s.dd[k..k + 1]),
                            );
                        }
                    }
                    LossKind::Global => {
                        let (ds_hidden, ds_out) = global.as_ref().expect("checked by caller");
                        for (dst, (a, b)) in s.dxg.iter_mut().zip(t.xg.iter().zip(x)) {
                            *dst = c * (a - b);
                        }
                        s.dh.fill(0.0);
                        ds_out.backward(p, &t.ds_h, &t.xg, &mut s.dxg, grad, Some(&mut s.dh));
                        ds_hidden.backward(p, &t.d, &t.ds_h, &mut s.dh, grad, Some(&mut s.dd));
                    }
                }
                s.dz.fill(0.0);
                for (k, layers) in per_pair.iter().enumerate() {
                    let mut dd = [s.dd[k]];
                    layers.proj.backward(p, &t.z, &t.d[k..k + 1], &mut dd, grad, Some(&mut s.dz));
                }
                s.de.fill(0.0);
                mix.backward(p, &t.e, &t.z, &mut s.dz, grad, Some(&mut s.de));
                for (k, (&(i, j), layers)) in pairs.iter().zip(per_pair).enumerate() {
                    let hk = &t.enc_h[k * h..(k + 1) * h];
                    let mut de = [s.de[k]];
                    s.dh.fill(0.0);
                    layers.enc_out.backward(p, hk, &t.e[k..k + 1], &mut de, grad, Some(&mut s.dh));
                    layers.enc_hidden.backward(p, &[x[i], x[j]], hk, &mut s.dh, grad, None);
                }
            }
            Layout::Dense {
                enc_hidden,
                enc_out,
                dec_hidden,
                dec_out,
            } => {
                debug_assert_eq!(loss, LossKind::Global);
                for (dst, (a, b)) in s.dxg.iter_mut().zip(t.xg.iter().zip(x)) {
                    *dst = c * (a - b);
                }
                s.dh.fill(0.0);
                dec_out.backward(p, &t.dec_h, &t.xg, &mut s.dxg, grad, Some(&mut s.dh));
                s.dz.fill(0.0);
                dec_hidden.backward(p, &t.z, &t.dec_h, &mut s.dh, grad, Some(&mut s.dz));
                s.dh.fill(0.0);
                enc_out.backward(p, &t.enc_h, &t.z, &mut s.dz, grad, Some(&mut s.dh));
                enc_hidden.backward(p, x, &t.enc_h, &mut s.dh, grad, None);
            }
        }
    }

    /// Rebuilds a model from serialized parts.
    pub fn from_parts(
        kind: VariantKind,
        n_modalities: usize,
        hidden_width: usize,
        latent_dim: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut model = Self::zeros(kind, n_modalities, hidden_width, latent_dim)?;
        if params.len() != model.params.len() {
            return Err(Error::DimensionMismatch {
                expected: model.params.len(),
                found: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite weight"));
        }
        model.params = params;
        Ok(model)
    }
}

struct Scratch {
    dd: Vec<f64>,
    dz: Vec<f64>,
    de: Vec<f64>,
    dh: Vec<f64>,
    dxg: Vec<f64>,
}

impl Scratch {
    fn new(m: &FaeModel) -> Self {
        Scratch {
            dd: vec![0.0; m.n_pairs()],
            dz: vec![0.0; m.latent_dim],
            de: vec![0.0; m.n_pairs()],
            dh: vec![0.0; m.hidden_width],
            dxg: vec![0.0; m.n_modalities],
        }
    }
}
