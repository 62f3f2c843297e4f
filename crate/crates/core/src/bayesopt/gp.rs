use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};

pub const LENGTHSCALE_GRID: [f64; 6] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6];
pub const NOISE_GRID: [f64; 3] = [1e-6, 1e-4, 1e-2];
const JITTER: f64 = 1e-8;
const MAX_JITTER: f64 = 1e-2;

/// GP regression with an RBF kernel on unit-cube inputs and standardized
/// outputs (unit signal variance).
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Matrix,
    outputs: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    lengthscale: f64,
    noise_var: f64,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_marginal_likelihood: f64,
}

fn kernel(a: &[f64], b: &[f64], lengthscale: f64) -> f64 {
    (-squared_distance(a, b) / (2.0 * lengthscale * lengthscale)).exp()
}

impl GpModel {
    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Diagonal jitter that made the kernel matrix factor.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn signal_var(&self) -> f64 {
        1.0
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    /// Observed outputs in loss units.
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn best_observed(&self) -> f64 {
        self.outputs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Prior (mean, standard deviation) in loss units.
    pub fn prior(&self) -> (f64, f64) {
        (self.y_mean, self.y_scale)
    }
}

fn standardize(y: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    (y.iter().map(|v| (v - mean) / scale).collect(), mean, scale)
}

fn check(inputs: &Matrix, outputs: &[f64]) -> Result<()> {
    if inputs.rows() == 0 {
        return Err(Error::invalid("GP needs at least one observation"));
    }
    if inputs.rows() != outputs.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.rows(),
            found: outputs.len(),
        });
    }
    if outputs.iter().chain(inputs.as_slice()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite GP observation"));
    }
    Ok(())
}

/// Fits with fixed kernel settings. The jitter starts at 1e-8 and grows
/// tenfold until the kernel matrix factors.
pub fn gp_fit_with(inputs: &Matrix, outputs: &[f64], lengthscale: f64, noise_var: f64) -> Result<GpModel> {
    check(inputs, outputs)?;
    if !(lengthscale > 0.0) || !(noise_var >= 0.0) {
        return Err(Error::invalid("lengthscale must be positive and noise nonnegative"));
    }
    let j = inputs.rows();
    let (y, y_mean, y_scale) = standardize(outputs);
    let mut k = DMatrix::from_fn(j, j, |a, b| kernel(inputs.row(a), inputs.row(b), lengthscale));
    for i in 0..j {
        k[(i, i)] += noise_var;
    }
    let mut jitter = JITTER;
    let chol = loop {
        let mut kj = k.clone();
        for i in 0..j {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            break c;
        }
        jitter *= 10.0;
        if jitter > MAX_JITTER {
            return Err(Error::Factorization);
        }
    };
    let yv = DVector::from_vec(y);
    let alpha = chol.solve(&yv);
    let log_det: f64 = chol.l_dirty().diagonal().iter().take(j).map(|d| d.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * yv.dot(&alpha) - 0.5 * log_det - 0.5 * j as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(GpModel {
        inputs: inputs.clone(),
        outputs: outputs.to_vec(),
        y_mean,
        y_scale,
        lengthscale,
        noise_var,
        jitter,
        chol,
        alpha,
        log_marginal_likelihood: lml,
    })
}

/// Fits over the lengthscale × noise grid and keeps the highest log marginal
/// likelihood (first grid entry on ties).
pub fn gp_fit(inputs: &Matrix, outputs: &[f64]) -> Result<GpModel> {
    check(inputs, outputs)?;
    let mut best: Option<GpModel> = None;
    let mut last_err = None;
    for &l in &LENGTHSCALE_GRID {
        for &s in &NOISE_GRID {
            match gp_fit_with(inputs, outputs, l, s) {
                Ok(m) => {
                    if best.as_ref().is_none_or(|b| m.log_marginal_likelihood > b.log_marginal_likelihood) {
                        best = Some(m);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(Error::Factorization))
}

/// Posterior mean and standard deviation of the latent function, in loss
/// units.
pub fn gp_posterior(model: &GpModel, x: &[f64]) -> (f64, f64) {
    let j = model.inputs.rows();
    let ks = DVector::from_fn(j, |i, _| kernel(model.inputs.row(i), x, model.lengthscale));
    let mu = ks.dot(&model.alpha);
    let v = model
        .chol
        .l_dirty()
        .view((0, 0), (j, j))
        .solve_lower_triangular(&ks)
        .expect("Cholesky factor has a positive diagonal");
    let var = (1.0 - v.dot(&v)).max(0.0);
    (model.y_mean + model.y_scale * mu, model.y_scale * var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    // Independent route: Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &k| a[i][col].abs().total_cmp(&a[k][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    fn brute_posterior(inputs: &Matrix, y: &[f64], l: f64, noise: f64, jitter: f64, x: &[f64]) -> (f64, f64) {
        let (ys, mean, scale) = standardize(y);
        let j = inputs.rows();
        let k = |a: &[f64], b: &[f64]| (-squared_distance(a, b) / (2.0 * l * l)).exp();
        let kmat: Vec<Vec<f64>> = (0..j)
            .map(|a| (0..j).map(|b| k(inputs.row(a), inputs.row(b)) + if a == b { noise + jitter } else { 0.0 }).collect())
            .collect();
        let ks: Vec<f64> = (0..j).map(|i| k(inputs.row(i), x)).collect();
        let alpha = dense_solve(kmat.clone(), ys);
        let w = dense_solve(kmat, ks.clone());
        let mu: f64 = ks.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let var: f64 = 1.0 - ks.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        (mean + scale * mu, scale * var.max(0.0).sqrt())
    }

    fn pts(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_point_interpolates() {
        let m = gp_fit_with(&pts(&[[0.3, 0.4]]), &[2.5], 0.2, 1e-6).unwrap();
        assert!((gp_posterior(&m, &[0.3, 0.4]).0 - 2.5).abs() < 1e-4);
        let m = gp_fit(&pts(&[[0.3, 0.4]]), &[2.5]).unwrap();
        assert!((gp_posterior(&m, &[0.3, 0.4]).0 - 2.5).abs() < 1e-4);
    }

    #[test]
    fn duplicate_inputs_factor() {
        let x = pts(&[[0.5, 0.5], [0.5, 0.5], [0.1, 0.9]]);
        assert!(gp_fit_with(&x, &[1.0, 1.0, 0.0], 0.4, 0.0).is_ok());
        assert!(gp_fit(&x, &[1.0, 1.0, 0.0]).is_ok());
    }

    #[test]
    fn two_point_closed_form() {
        // Standardized y = (-1, 1); k(0,1) = e^{-1/2}; k_* = (e^{-1/8}, e^{-1/8}).
        // k_*^T K^{-1} y is zero by symmetry, so the mean is the output mean 0.5.
        let x = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let m = gp_fit_with(&x, &[0.0, 1.0], 1.0, 0.0).unwrap();
        let (mu, sigma) = gp_posterior(&m, &[0.5]);
        assert!((mu - 0.5).abs() < 1e-12);
        // Variance 1 - 2 e^{-1/4} / (1 + e^{-1/2}) by explicit 2x2 inversion, times scale 0.5.
        let c = (-0.5f64).exp();
        let s = (-0.125f64).exp();
        let inv = [[1.0 / (1.0 - c * c), -c / (1.0 - c * c)], [-c / (1.0 - c * c), 1.0 / (1.0 - c * c)]];
        let quad = s * s * (inv[0][0] + inv[0][1] + inv[1][0] + inv[1][1]);
        assert!((sigma - 0.5 * (1.0 - quad).sqrt()).abs() < 1e-6);
        // An off-center point against the same hand inverse.
        let (mu, _) = gp_posterior(&m, &[0.2]);
        let ks = [(-0.02f64).exp(), (-0.32f64).exp()];
        let w = [ks[0] * inv[0][0] + ks[1] * inv[1][0], ks[0] * inv[0][1] + ks[1] * inv[1][1]];
        assert!((mu - (0.5 + 0.5 * (-w[0] + w[1]))).abs() < 1e-6);
    }

    #[test]
    fn far_field_returns_prior() {
        let x = pts(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.1]]);
        let m = gp_fit_with(&x, &[1.0, 2.0, 4.0], 0.05, 1e-6).unwrap();
        let (mu, sigma) = gp_posterior(&m, &[50.0, 50.0]);
        let (pm, ps) = m.prior();
        assert!((mu - pm).abs() < 1e-12 && (sigma - ps).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_dense_solve(j in 1usize..=20, seed in 0u64..500, li in 0usize..6, ni in 0usize..3) {
            let mut rng = crate::seed::rng(seed);
            let x = Matrix::from_vec(j, 2, (0..2 * j).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let y: Vec<f64> = (0..j).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (l, s) = (LENGTHSCALE_GRID[li], NOISE_GRID[ni]);
            let m = gp_fit_with(&x, &y, l, s).unwrap();
            let q = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let (mu, sigma) = gp_posterior(&m, &q);
            let (bm, bs) = brute_posterior(&x, &y, l, s, m.jitter(), &q);
            prop_assert!((mu - bm).abs() < 1e-8 * bm.abs().max(1.0), "{} vs {}", mu, bm);
            prop_assert!((sigma - bs).abs() < 1e-6, "{} vs {}", sigma, bs);
            prop_assert!(sigma <= m.prior().1 + 1e-12);
        }

        #[test]
        fn interpolates_noise_free(seed in 0u64..200) {
            // Jittered 3x3 grid: pairwise gaps stay above the lengthscale, so the
            // 1e-8 diagonal jitter is the only source of error.
            let mut rng = crate::seed::rng(seed);
            let rows: Vec<[f64; 2]> = (0..9)
                .map(|k| [(k % 3) as f64 * 0.4 + rng.random_range(0.0..0.1), (k / 3) as f64 * 0.4 + rng.random_range(0.0..0.1)])
                .collect();
            let x = Matrix::from_rows(&rows).unwrap();
            let y: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let m = gp_fit_with(&x, &y, 0.1, 0.0).unwrap();
            for i in 0..9 {
                let (mu, _) = gp_posterior(&m, x.row(i));
                prop_assert!((mu - y[i]).abs() <= 1e-6 * y[i].abs().max(1.0), "{} {}", mu, y[i]);
            }
        }
    }
}
