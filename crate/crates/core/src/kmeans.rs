//! Lloyd's k-means with k-means++ seeding and best-of-n restarts.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iterations: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iterations: MAX_ITERATIONS,
        }
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with the default 10 restarts; the lowest-inertia run wins.
pub fn kmeans_baseline(points: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    kmeans(points, k, seed, &KMeansConfig::default())
}

pub fn kmeans(
    points: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "k-means needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..config.restarts.max(1) {
        let run = lloyd(points, plus_plus_init(points, k, &mut rng), config.max_iterations);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_init<R: Rng>(points: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut closest: Vec<f64> = points
        .outer_iter()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    let mut taken = vec![false; n];
    taken[first] = true;
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // every point coincides with a center already; take an unused one
            (0..n).find(|&i| !taken[i]).unwrap_or(0)
        };
        taken[pick] = true;
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            closest[i] = closest[i].min(sq_dist(p, points.row(pick)));
        }
    }
    centroids
}

fn nearest(p: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn lloyd(points: ArrayView2<'_, f64>, mut centroids: Array2<f64>, max_iterations: usize) -> KMeansResult {
    let (n, d) = points.dim();
    let k = centroids.nrows();
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..max_iterations {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.outer_iter().enumerate() {
            let (j, dist) = nearest(p, &centroids);
            dists[i] = dist;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, p) in points.outer_iter().enumerate() {
            let mut s = sums.row_mut(assignments[i]);
            s += &p;
            counts[assignments[i]] += 1;
        }
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                let c = sums.row(j).mapv(|v| v / count as f64);
                centroids.row_mut(j).assign(&c);
            } else {
                // re-seed an empty cluster at the worst-served point
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n > 0");
                centroids.row_mut(j).assign(&points.row(far));
                dists[far] = 0.0;
            }
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.outer_iter().enumerate() {
        let (j, dist) = nearest(p, &centroids);
        assignments[i] = j;
        inertia += dist;
    }
    KMeansResult {
        assignments,
        centroids,
        inertia,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separated_pairs() {
        let pts = array![[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]];
        let r = kmeans_baseline(pts.view(), 2, 3).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        assert!((r.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_clusters_have_zero_inertia() {
        let pts = array![[0.0, 0.0], [1.0, 3.0], [2.0, -1.0], [5.0, 5.0], [0.5, 0.5]];
        let r = kmeans_baseline(pts.view(), 5, 0).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut seen = r.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let pts = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let r = kmeans_baseline(pts.view(), 3, 0).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn rejects_too_many_clusters() {
        let pts = array![[0.0], [1.0]];
        assert!(kmeans_baseline(pts.view(), 3, 0).is_err());
        assert!(kmeans_baseline(pts.view(), 0, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let pts = Array2::from_shape_fn((60, 3), |(i, j)| ((i * 7 + j * 13) % 17) as f64 + (i / 20) as f64 * 20.0);
        let a = kmeans_baseline(pts.view(), 3, 42).unwrap();
        let b = kmeans_baseline(pts.view(), 3, 42).unwrap();
        assert_eq!(a, b);
    }
}
