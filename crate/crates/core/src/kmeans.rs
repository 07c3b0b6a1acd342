//! Lloyd's K-means with seeded k-means++ initialization.
//!
//! Squared Euclidean distance, computed in `f64`. Each iteration assigns,
//! records the objective, checks convergence and only then moves the
//! centroids, so the returned centroids always reproduce the returned
//! assignments under nearest-centroid lookup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_ITERATIONS: usize = 100;
pub const RELATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f32>>,
    /// Centroid index per input point.
    pub assignments: Vec<usize>,
    /// Objective after each assignment step.
    pub objective_history: Vec<f64>,
}

pub fn squared_distance(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &c)| (x as f64 - c).powi(2)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(point: &[f32], centroids: &[Vec<f32>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d: f64 = point.iter().zip(c).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn nearest_f64(point: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn to_f64(p: &[f32]) -> Vec<f64> {
    p.iter().map(|&v| v as f64).collect()
}

fn plus_plus_init(points: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![to_f64(points[rng.random_range(0..points.len())])];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = to_f64(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Clusters `points` into at most `k` centroids. With fewer points than `k`,
/// every point is its own centroid. Exactly duplicated centroids are merged
/// at the end.
pub fn kmeans(points: &[&[f32]], k: usize, seed: u64) -> KMeans {
    if points.is_empty() || k == 0 {
        return KMeans { centroids: Vec::new(), assignments: Vec::new(), objective_history: Vec::new() };
    }
    if points.len() <= k {
        let centroids: Vec<Vec<f32>> = points.iter().map(|p| p.to_vec()).collect();
        let mut out = KMeans { assignments: (0..points.len()).collect(), centroids, objective_history: vec![0.0] };
        dedup(&mut out);
        return out;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut distances = vec![0f64; points.len()];
    let mut history = Vec::new();

    for iteration in 0..MAX_ITERATIONS {
        for (i, p) in points.iter().enumerate() {
            (assignments[i], distances[i]) = nearest_f64(p, &centroids);
        }
        let objective: f64 = distances.iter().sum();
        let converged = history.last().is_some_and(|&prev: &f64| {
            prev - objective <= RELATIVE_TOLERANCE * prev.abs().max(f64::MIN_POSITIVE)
        });
        history.push(objective);
        if converged || objective == 0.0 || iteration + 1 == MAX_ITERATIONS {
            break;
        }
        centroids = update(points, &assignments, &distances, &centroids);
    }

    let mut out = KMeans {
        centroids: centroids.iter().map(|c| c.iter().map(|&v| v as f32).collect()).collect(),
        assignments,
        objective_history: history,
    };
    dedup(&mut out);
    out
}

/// Mean of each cluster. An empty cluster takes the point farthest from its
/// current centroid, each empty cluster a different point.
fn update(points: &[&[f32]], assignments: &[usize], distances: &[f64], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = old[0].len();
    let mut sums = vec![vec![0f64; dim]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, &v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v as f64;
        }
    }
    let mut by_distance: Vec<usize> = (0..points.len()).collect();
    by_distance.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    let mut donors = by_distance.into_iter();
    sums.into_iter()
        .zip(&counts)
        .map(|(s, &n)| {
            if n > 0 {
                s.into_iter().map(|v| v / n as f64).collect()
            } else {
                let d = donors.next().expect("more points than clusters");
                to_f64(points[d])
            }
        })
        .collect()
}

fn dedup(out: &mut KMeans) {
    let mut kept: Vec<Vec<f32>> = Vec::new();
    let mut remap = Vec::with_capacity(out.centroids.len());
    for c in &out.centroids {
        let bits: Vec<u32> = c.iter().map(|v| v.to_bits()).collect();
        match kept.iter().position(|k| k.iter().map(|v| v.to_bits()).eq(bits.iter().copied())) {
            Some(i) => remap.push(i),
            None => {
                remap.push(kept.len());
                kept.push(c.clone());
            }
        }
    }
    if kept.len() == out.centroids.len() {
        return;
    }
    for a in &mut out.assignments {
        *a = remap[*a];
    }
    out.centroids = kept;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn refs(points: &[Vec<f32>]) -> Vec<&[f32]> {
        points.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![2.0, 3.0]];
        let r = kmeans(&refs(&pts), 1, 0);
        assert_eq!(r.centroids.len(), 1);
        assert!((r.centroids[0][0] - 2.0).abs() < 1e-6);
        assert!((r.centroids[0][1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_points_collapse() {
        let pts = vec![vec![0.5f32, 0.5]; 10];
        let r = kmeans(&refs(&pts), 3, 4);
        assert_eq!(r.centroids, vec![vec![0.5, 0.5]]);
        assert!(r.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn fewer_points_than_clusters() {
        let pts = vec![vec![0.0f32], vec![1.0]];
        let r = kmeans(&refs(&pts), 5, 1);
        assert_eq!(r.centroids, pts);
        assert_eq!(r.assignments, vec![0, 1]);
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f32>> = (0..60).map(|_| (0..3).map(|_| rng.random::<f32>()).collect()).collect();
        assert_eq!(kmeans(&refs(&pts), 4, 9), kmeans(&refs(&pts), 4, 9));
    }

    #[test]
    fn returned_centroids_reproduce_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec<f32>> = (0..80).map(|_| (0..2).map(|_| rng.random::<f32>()).collect()).collect();
        let r = kmeans(&refs(&pts), 5, 2);
        for (p, &a) in pts.iter().zip(&r.assignments) {
            assert_eq!(nearest(p, &r.centroids), a);
        }
    }

    proptest! {
        #[test]
        fn objective_never_increases(seed in 0u64..1000, n in 2usize..60, k in 1usize..8, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-5.0f32..5.0)).collect()).collect();
            let r = kmeans(&refs(&pts), k, seed);
            for w in r.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{:?}", r.objective_history);
            }
            prop_assert!(r.centroids.len() <= k);
        }
    }
}
