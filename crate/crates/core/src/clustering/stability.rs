use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hungarian::min_cost_assignment;
use super::kmeans::{kmeans_fit, kmeans_predict};
use super::ClusterModel;
use crate::cohort::{split_indices, Cohort};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

/// Best relabeling of `b` onto `a`: `permutation[label_b] = label_a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub permutation: Vec<usize>,
    pub mismatches: usize,
}

/// Solves the assignment problem on the confusion matrix, maximizing the
/// number of positions where `a` and the relabeled `b` agree.
pub fn align_labels(a: &[usize], b: &[usize], eta: usize) -> Result<Alignment> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if let Some(&l) = a.iter().chain(b).find(|&&l| l >= eta) {
        return Err(Error::invalid(format!("label {l} out of range for {eta} clusters")));
    }
    let mut confusion = vec![0i64; eta * eta];
    for (&x, &y) in a.iter().zip(b) {
        confusion[y * eta + x] += 1;
    }
    let cost: Vec<i64> = confusion.iter().map(|&c| -c).collect();
    let permutation = min_cost_assignment(&cost, eta);
    let agree: i64 = (0..eta).map(|y| confusion[y * eta + permutation[y]]).sum();
    Ok(Alignment {
        permutation,
        mismatches: a.len() - agree as usize,
    })
}

/// Fraction of positions that disagree after the best relabeling.
pub fn label_distance(a: &[usize], b: &[usize], eta: usize) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::invalid("empty label vectors"));
    }
    Ok(align_labels(a, b, eta)?.mismatches as f64 / a.len() as f64)
}

/// Permutation-minimized Hamming disagreement of two clusterings on the
/// validation points, normalized by their count.
pub fn stability_distance(c: &ClusterModel, c_prime: &ClusterModel, val_points: &Matrix) -> Result<f64> {
    if c.eta != c_prime.eta {
        return Err(Error::invalid(format!(
            "cluster counts differ: {} vs {}",
            c.eta, c_prime.eta
        )));
    }
    if c.centroids.cols() != c_prime.centroids.cols() {
        return Err(Error::DimensionMismatch {
            expected: c.centroids.cols(),
            found: c_prime.centroids.cols(),
        });
    }
    if val_points.rows() == 0 {
        return Err(Error::invalid("empty validation set"));
    }
    let a = kmeans_predict(c, val_points)?;
    let b = kmeans_predict(c_prime, val_points)?;
    label_distance(&a, &b, c.eta)
}

pub fn stability_score(loss: f64) -> f64 {
    1.0 - loss
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilitySettings {
    pub eta: usize,
    pub k_trials: usize,
    /// Share of patients in the training part of each split.
    pub fraction: f64,
    pub n_init: usize,
    pub max_iter: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityOutcome {
    pub loss: f64,
    pub distances: Vec<f64>,
}

impl StabilityOutcome {
    pub fn score(&self) -> f64 {
        stability_score(self.loss)
    }
}

/// Runs `k_trials` patient-level resampling trials. For each trial the
/// provider maps the (train, validation) sub-cohorts to latent pixels; C is
/// fit on the train latents, C' on the validation latents, and both are
/// compared on the validation latents. Trials run in parallel and are
/// averaged in trial order.
pub fn stability_loss<P>(provider: &P, cohort: &Cohort, settings: &StabilitySettings) -> Result<StabilityOutcome>
where
    P: Fn(&Cohort, &Cohort, usize) -> Result<(Matrix, Matrix)> + Sync,
{
    if settings.k_trials == 0 {
        return Err(Error::invalid("need at least one stability trial"));
    }
    let distances: Vec<Result<f64>> = (0..settings.k_trials)
        .into_par_iter()
        .map(|k| {
            let split_seed = seed::derive(settings.seed, "stability-split", k as u64);
            let (tr, va) = split_indices(cohort.n_patients(), settings.fraction, split_seed)?;
            let (z_tr, z_va) = provider(&cohort.subset(&tr), &cohort.subset(&va), k)?;
            let fit = |z: &Matrix, tag| {
                kmeans_fit(
                    z,
                    settings.eta,
                    seed::derive(settings.seed, tag, k as u64),
                    settings.n_init,
                    settings.max_iter,
                )
            };
            let c = fit(&z_tr, "stability-c")?;
            let c_prime = fit(&z_va, "stability-c-prime")?;
            stability_distance(&c, &c_prime, &z_va)
        })
        .collect();
    let distances = distances.into_iter().collect::<Result<Vec<f64>>>()?;
    let loss = distances.iter().sum::<f64>() / distances.len() as f64;
    Ok(StabilityOutcome { loss, distances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent route: try every relabeling.
    fn brute(a: &[usize], b: &[usize], eta: usize) -> usize {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            perms(n - 1)
                .into_iter()
                .flat_map(|p| {
                    (0..n).map(move |i| {
                        let mut q = p.clone();
                        q.insert(i, n - 1);
                        q
                    })
                })
                .collect()
        }
        perms(eta)
            .iter()
            .map(|p| a.iter().zip(b).filter(|&(&x, &y)| p[y] != x).count())
            .min()
            .unwrap()
    }

    fn col(xs: &[f64]) -> Matrix {
        Matrix::from_vec(xs.len(), 1, xs.to_vec()).unwrap()
    }

    fn model(cs: &[f64]) -> ClusterModel {
        ClusterModel {
            centroids: col(cs),
            eta: cs.len(),
            inertia: 0.0,
        }
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(align_labels(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap().mismatches, 0);
        let r = align_labels(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(r.mismatches, brute(&[0, 0, 1, 1], &[0, 1, 1, 1], 2));
        assert_eq!(r.mismatches, 1);
        assert_eq!(r.permutation, vec![0, 1]);
        let same = align_labels(&[2, 0, 1, 2], &[2, 0, 1, 2], 3).unwrap();
        assert_eq!(same.mismatches, 0);
        assert_eq!(same.permutation, vec![0, 1, 2]);
    }

    #[test]
    fn distance_examples() {
        let val = col(&[1.0, 2.0, 3.0, 5.0]);
        assert_eq!(stability_distance(&model(&[0.0, 10.0]), &model(&[0.0, 10.0]), &val).unwrap(), 0.0);
        // 5.0 sits on the 0/10 boundary, where the tie rule depends on centroid order.
        let off_boundary = col(&[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(stability_distance(&model(&[0.0, 10.0]), &model(&[10.0, 0.0]), &off_boundary).unwrap(), 0.0);
        let a = kmeans_predict(&model(&[0.0, 10.0]), &val).unwrap();
        let b = kmeans_predict(&model(&[0.0, 4.0]), &val).unwrap();
        assert_eq!(a, vec![0, 0, 0, 0]);
        assert_eq!(b, vec![0, 0, 1, 1]);
        assert_eq!(brute(&a, &b, 2), 2);
        assert_eq!(stability_distance(&model(&[0.0, 10.0]), &model(&[0.0, 4.0]), &val).unwrap(), 0.5);
        assert!(stability_distance(&model(&[0.0, 1.0]), &model(&[0.0, 1.0]), &Matrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn score_is_one_minus_loss() {
        assert_eq!(stability_score(0.0), 1.0);
        assert_eq!(stability_score(1.0), 0.0);
        assert!((stability_score(0.077) - 0.923).abs() < 1e-12);
    }

    fn labels(eta: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0..eta, 12)
    }

    proptest! {
        #[test]
        fn hungarian_equals_brute_force(eta in 1usize..=6, n in 1usize..=12, a in labels(6), b in labels(6)) {
            let a: Vec<usize> = a[..n].iter().map(|l| l % eta).collect();
            let b: Vec<usize> = b[..n].iter().map(|l| l % eta).collect();
            prop_assert_eq!(align_labels(&a, &b, eta).unwrap().mismatches, brute(&a, &b, eta));
        }

        #[test]
        fn label_distance_is_a_pseudometric(eta in 1usize..=4, n in 1usize..=12, a in labels(4), b in labels(4), c in labels(4), perm_seed in 0u64..100) {
            let cut = |v: Vec<usize>| -> Vec<usize> { v[..n].iter().map(|l| l % eta).collect() };
            let (a, b, c) = (cut(a), cut(b), cut(c));
            let d = |x: &[usize], y: &[usize]| label_distance(x, y, eta).unwrap();
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
            let mut p: Vec<usize> = (0..eta).collect();
            {
                use rand::seq::SliceRandom;
                p.shuffle(&mut seed::rng(perm_seed));
            }
            let relabeled: Vec<usize> = a.iter().map(|&l| p[l]).collect();
            prop_assert_eq!(d(&a, &relabeled), 0.0);
            let v = d(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
