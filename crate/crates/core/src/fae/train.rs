use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{FaeModel, LossKind};
use super::FaeConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

const ADAM_EPS: f64 = 1e-8;

/// Per-epoch loss history. Index 0 is the full-data loss before training;
/// index `e` is the mean minibatch loss seen during epoch `e`. A loss the
/// variant does not optimize stays empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub pairwise: Vec<f64>,
    pub global: Vec<f64>,
}

/// Adam with first/second moments and a step count per parameter, so
/// parameters shared between the two alternating steps share their state.
struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<i32>,
}

impl Adam {
    fn new(n: usize, config: &FaeConfig) -> Self {
        Adam {
            lr: config.learning_rate,
            b1: config.adam_betas.0,
            b2: config.adam_betas.1,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: vec![0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], mask: &[bool]) {
        for k in 0..params.len() {
            if !mask[k] {
                continue;
            }
            let g = grad[k];
            self.t[k] += 1;
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g;
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g;
            let m_hat = self.m[k] / (1.0 - self.b1.powi(self.t[k]));
            let v_hat = self.v[k] / (1.0 - self.b2.powi(self.t[k]));
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Trains a copy of `model` on standardized pixels. Each minibatch takes an
/// Adam step on the pairwise loss (encoders, mixing, projections, pair
/// decoders) followed by one on the global loss (encoders, mixing,
/// projections, global decoder); variants without one of the decoders skip
/// that step. Batch order comes from a seeded shuffle.
pub fn train(model: &FaeModel, pixels: &Matrix, config: &FaeConfig) -> Result<(FaeModel, LossTrace)> {
    config.validate()?;
    if pixels.is_empty() {
        return Err(Error::invalid("no pixels to train on"));
    }
    if pixels.cols() != model.n_modalities() {
        return Err(Error::DimensionMismatch {
            expected: model.n_modalities(),
            found: pixels.cols(),
        });
    }
    let mut model = model.clone();
    let steps: Vec<(LossKind, Vec<bool>)> = [LossKind::Pairwise, LossKind::Global]
        .into_iter()
        .filter(|&k| model.supports(k))
        .map(|k| (k, model.update_mask(k)))
        .collect();

    let mut trace = LossTrace::default();
    for (kind, _) in &steps {
        let l = model.loss(pixels, *kind)?;
        if !l.is_finite() {
            return Err(Error::Divergence { epoch: 0 });
        }
        history(&mut trace, *kind).push(l);
    }

    let mut adam = Adam::new(model.n_params(), config);
    let mut grad = vec![0.0; model.n_params()];
    let mut order: Vec<usize> = (0..pixels.rows()).collect();
    let mut rng = seed::derived_rng(config.seed, "fae-batches", 0);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 2];
        let mut n_batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            for (slot, (kind, mask)) in steps.iter().enumerate() {
                let l = model.loss_and_grad(pixels, batch, *kind, &mut grad);
                if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence { epoch });
                }
                sums[slot] += l;
                adam.step(model.params_mut(), &grad, mask);
            }
            n_batches += 1;
        }
        for (slot, (kind, _)) in steps.iter().enumerate() {
            history(&mut trace, *kind).push(sums[slot] / n_batches as f64);
        }
        if model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
    }
    Ok((model, trace))
}

fn history(trace: &mut LossTrace, kind: LossKind) -> &mut Vec<f64> {
    match kind {
        LossKind::Pairwise => &mut trace.pairwise,
        LossKind::Global => &mut trace.global,
    }
}
