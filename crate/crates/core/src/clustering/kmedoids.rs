use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMedoids {
    /// Row indices of the medoids, ascending. Label `j` belongs to `medoids[j]`.
    pub medoids: Vec<usize>,
    pub labels: Vec<usize>,
    /// Sum of Euclidean distances to the nearest medoid.
    pub cost: f64,
    /// Cost after BUILD and after every accepted swap.
    pub cost_trace: Vec<f64>,
}

fn total_cost(dist: &[f64], n: usize, medoids: &[usize]) -> f64 {
    (0..n)
        .map(|i| medoids.iter().map(|&m| dist[i * n + m]).fold(f64::INFINITY, f64::min))
        .sum()
}

/// PAM: greedy BUILD then best-improvement SWAP until no swap lowers the
/// cost. Fully deterministic; ties resolve to the lowest index.
pub fn kmedoids_fit(points: &Matrix, k: usize) -> Result<KMedoids> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::invalid("need at least one medoid"));
    }
    if n < k {
        return Err(Error::invalid(format!("k-medoids needs at least {k} points, got {n}")));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let d = squared_distance(points.row(i), points.row(j)).sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    while medoids.len() < k {
        let mut best = (usize::MAX, f64::INFINITY);
        for cand in 0..n {
            if medoids.contains(&cand) {
                continue;
            }
            medoids.push(cand);
            let c = total_cost(&dist, n, &medoids);
            medoids.pop();
            if c < best.1 {
                best = (cand, c);
            }
        }
        medoids.push(best.0);
    }
    let mut cost = total_cost(&dist, n, &medoids);
    let mut trace = vec![cost];

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..k {
            for cand in 0..n {
                if medoids.contains(&cand) {
                    continue;
                }
                let old = medoids[slot];
                medoids[slot] = cand;
                let c = total_cost(&dist, n, &medoids);
                medoids[slot] = old;
                if c < best.map_or(cost, |b| b.2) - 1e-12 * cost.abs().max(1.0) {
                    best = Some((slot, cand, c));
                }
            }
        }
        match best {
            Some((slot, cand, c)) => {
                medoids[slot] = cand;
                cost = c;
                trace.push(c);
            }
            None => break,
        }
    }

    medoids.sort_unstable();
    let labels = (0..n)
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for (j, &m) in medoids.iter().enumerate() {
                if dist[i * n + m] < best.1 {
                    best = (j, dist[i * n + m]);
                }
            }
            best.0
        })
        .collect();
    Ok(KMedoids {
        medoids,
        labels,
        cost,
        cost_trace: trace,
    })
}
