use super::model::{FaeModel, LossKind};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Maximum relative error between analytic and central-difference gradients,
/// per loss the model supports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub pairwise: Option<f64>,
    pub global: Option<f64>,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.pairwise.unwrap_or(0.0).max(self.global.unwrap_or(0.0))
    }
}

fn check_one(model: &FaeModel, batch: &Matrix, loss: LossKind, eps: f64) -> Result<f64> {
    let (_, analytic) = model.gradient(batch, loss)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for k in 0..model.n_params() {
        let orig = probe.params()[k];
        probe.params_mut()[k] = orig + eps;
        let hi = probe.loss(batch, loss)?;
        probe.params_mut()[k] = orig - eps;
        let lo = probe.loss(batch, loss)?;
        probe.params_mut()[k] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Compares backpropagated gradients with central finite differences,
/// parameter by parameter, for every loss the model has.
pub fn gradient_check(model: &FaeModel, batch: &Matrix, epsilon: f64) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let run = |loss| -> Result<Option<f64>> {
        if model.supports(loss) {
            check_one(model, batch, loss, epsilon).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(GradCheckReport {
        pairwise: run(LossKind::Pairwise)?,
        global: run(LossKind::Global)?,
    })
}
