//! k-means++ clustering of patch features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid (lowest index on ties).
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seed<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            d2.iter().position(|&w| {
                u -= w;
                u < 0.0 && w > 0.0
            })
            .unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            0
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().unwrap()));
        }
    }
    centroids
}

/// Lloyd iterations from k-means++ seeds. An empty cluster is reseeded at the
/// point farthest from its current centroid. Stops when no centroid moves by
/// more than `tol` or after `max_iter` iterations.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(Error::Config(format!("k = {k} must lie in [1, {}] (point count)", points.len())));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Contract("k-means points must share one dimension".into()));
    }
    let mut rng = stream(seed, &[]);
    let mut centroids = plus_plus_seed(points, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let mut inertia = 0.0;
        let mut far = (0usize, -1.0f64);
        for (i, p) in points.iter().enumerate() {
            let (j, dist) = nearest(p, &centroids);
            assignments[i] = j;
            inertia += dist;
            if dist > far.1 {
                far = (i, dist);
            }
        }
        history.push(inertia);
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let next = if counts[j] == 0 {
                points[far.0].clone()
            } else {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            };
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if shift <= tol {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, dist) = nearest(p, &centroids);
        assignments[i] = j;
        inertia += dist;
    }
    Ok(KMeansResult { centroids, assignments, inertia, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let r = kmeans(&pts, 1, 0, KMEANS_MAX_ITER, KMEANS_TOL).unwrap();
        assert_eq!(r.centroids, vec![vec![2.0, 1.0]]);
    }

    #[test]
    fn identical_points_collapse_to_cluster_zero() {
        let pts = vec![vec![1.5, -2.0]; 7];
        let r = kmeans(&pts, 3, 4, KMEANS_MAX_ITER, KMEANS_TOL).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(r.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn k_above_point_count_is_rejected() {
        assert!(matches!(kmeans(&[vec![0.0]], 2, 0, 10, 1e-6), Err(Error::Config(_))));
    }
}
