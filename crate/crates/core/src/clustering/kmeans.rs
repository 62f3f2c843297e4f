use rand::Rng;
use rayon::prelude::*;

use super::ClusterModel;
use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::seed;

/// Index of the nearest centroid; ties go to the lowest index.
pub(crate) fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(points: &Matrix, centroids: &Matrix, labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (l, x) in labels.iter_mut().zip(points.iter_rows()) {
        let (k, d) = nearest(centroids, x);
        *l = k;
        inertia += d;
    }
    inertia
}

fn plus_plus_init(points: &Matrix, eta: usize, rng: &mut impl Rng) -> Result<Matrix> {
    let n = points.rows();
    let mut centroids = Matrix::zeros(eta, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points.iter_rows().map(|x| squared_distance(x, points.row(first))).collect();
    for k in 1..eta {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("k-means input: fewer distinct points than clusters"));
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        // Guard against landing on a zero-weight point through rounding.
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0).expect("total is positive");
        }
        centroids.row_mut(k).copy_from_slice(points.row(pick));
        for (d, x) in d2.iter_mut().zip(points.iter_rows()) {
            *d = d.min(squared_distance(x, points.row(pick)));
        }
    }
    Ok(centroids)
}

/// One seeded k-means++ / Lloyd run. Returns the model and the inertia after
/// every assignment step.
pub(crate) fn lloyd(points: &Matrix, eta: usize, max_iter: usize, rng: &mut impl Rng) -> Result<(ClusterModel, Vec<f64>)> {
    let n = points.rows();
    let d = points.cols();
    let mut centroids = plus_plus_init(points, eta, rng)?;
    let mut labels = vec![0; n];
    let mut history = vec![assign(points, &centroids, &mut labels)];
    let mut next = vec![0; n];
    for _ in 0..max_iter {
        let mut sums = Matrix::zeros(eta, d);
        let mut counts = vec![0usize; eta];
        for (&l, x) in labels.iter().zip(points.iter_rows()) {
            counts[l] += 1;
            for (s, v) in sums.row_mut(l).iter_mut().zip(x) {
                *s += v;
            }
        }
        for k in 0..eta {
            if counts[k] > 0 {
                let c = counts[k] as f64;
                for (dst, s) in centroids.row_mut(k).iter_mut().zip(sums.row(k)) {
                    *dst = s / c;
                }
            }
        }
        // Re-seed empty clusters at the point worst served by its centroid.
        for k in 0..eta {
            if counts[k] == 0 {
                let (far, _) = points
                    .iter_rows()
                    .enumerate()
                    .map(|(i, x)| (i, nearest(&centroids, x).1))
                    .fold((0, -1.0), |acc, (i, dist)| if dist > acc.1 { (i, dist) } else { acc });
                centroids.row_mut(k).copy_from_slice(points.row(far));
            }
        }
        let inertia = assign(points, &centroids, &mut next);
        history.push(inertia);
        if next == labels {
            break;
        }
        std::mem::swap(&mut labels, &mut next);
    }
    let inertia = *history.last().expect("at least one assignment");
    Ok((
        ClusterModel {
            centroids,
            eta,
            inertia,
        },
        history,
    ))
}

/// k-means with k-means++ seeding and Lloyd iterations, keeping the best of
/// `n_init` seeded restarts by inertia (lowest restart index on ties).
pub fn kmeans_fit(points: &Matrix, eta: usize, seed: u64, n_init: usize, max_iter: usize) -> Result<ClusterModel> {
    if eta < 2 {
        return Err(Error::invalid(format!("cluster count must be at least 2, got {eta}")));
    }
    if points.rows() < eta {
        return Err(Error::invalid(format!(
            "k-means needs at least {eta} points, got {}",
            points.rows()
        )));
    }
    if points.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite point"));
    }
    let runs: Vec<Result<ClusterModel>> = (0..n_init.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::derived_rng(seed, "kmeans-restart", r as u64);
            lloyd(points, eta, max_iter, &mut rng).map(|(m, _)| m)
        })
        .collect();
    let mut best: Option<ClusterModel> = None;
    for run in runs {
        let m = run?;
        if best.as_ref().is_none_or(|b| m.inertia < b.inertia) {
            best = Some(m);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

/// Nearest-centroid labels (Euclidean, lowest index on ties).
pub fn kmeans_predict(model: &ClusterModel, points: &Matrix) -> Result<Vec<usize>> {
    if points.rows() > 0 && points.cols() != model.centroids.cols() {
        return Err(Error::DimensionMismatch {
            expected: model.centroids.cols(),
            found: points.cols(),
        });
    }
    Ok(points.iter_rows().map(|x| nearest(&model.centroids, x).0).collect())
}
