use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labeling::InstanceLabeling;
use crate::semiconv::EmbeddingField;

pub const MAX_ITERS: usize = 300;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per point.
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
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

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut idx = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if r < acc {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until no centroid moves by
/// more than [`TOLERANCE`] or [`MAX_ITERS`] is reached. Empty clusters keep
/// their previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if points.is_empty() {
        return Err(Error::invalid("k-means on an empty point set"));
    }
    if k > points.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("k-means points differ in dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignment = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        assignment = points.par_iter().map(|p| nearest(p, &centroids).0).collect();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if shift < TOLERANCE {
            break;
        }
    }
    assignment = points.par_iter().map(|p| nearest(p, &centroids).0).collect();
    Ok(KMeans {
        centroids,
        assignment,
        iterations,
    })
}

/// Cluster the embeddings of `foreground` pixels into `k` instances.
/// Background pixels get label 0; non-empty clusters are numbered `1..` in
/// cluster order.
pub fn decode_kmeans(
    field: &EmbeddingField<'_>,
    foreground: &[usize],
    k: usize,
    seed: u64,
) -> Result<InstanceLabeling> {
    if foreground.is_empty() {
        return Err(Error::invalid("no foreground pixels to cluster"));
    }
    let km = kmeans(&field.rows(foreground), k, seed)?;
    let mut used = vec![false; k];
    for &a in &km.assignment {
        used[a] = true;
    }
    let mut id = vec![0u16; k];
    let mut next = 0u16;
    for j in 0..k {
        if used[j] {
            next += 1;
            id[j] = next;
        }
    }
    let mut labels = vec![0u16; field.height() * field.width()];
    for (&p, &a) in foreground.iter().zip(&km.assignment) {
        labels[p] = id[a];
    }
    InstanceLabeling::new(field.height(), field.width(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_blobs() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(vec![i as f64 * 0.01, 0.0]);
            pts.push(vec![10.0 + i as f64 * 0.01, 5.0]);
        }
        let km = kmeans(&pts, 2, 3).unwrap();
        for i in 0..10 {
            assert_eq!(km.assignment[2 * i], km.assignment[0]);
            assert_eq!(km.assignment[2 * i + 1], km.assignment[1]);
        }
        assert_ne!(km.assignment[0], km.assignment[1]);
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = vec![vec![0.0], vec![1.0], vec![5.0]];
        let km = kmeans(&pts, 1, 0).unwrap();
        assert_eq!(km.centroids[0], vec![2.0]);
    }

    #[test]
    fn identical_points() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let km = kmeans(&pts, 3, 0).unwrap();
        assert!(km.assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn bad_k() {
        assert!(kmeans(&[vec![0.0]], 0, 0).is_err());
        assert!(kmeans(&[vec![0.0]], 2, 0).is_err());
        assert!(kmeans(&[], 1, 0).is_err());
    }
}
