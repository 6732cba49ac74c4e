use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sq_dist, LatentCloud};
use crate::error::{ensure, Result};
use crate::nngrad::Matrix;

pub const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    /// `c x k`.
    pub centroids: Matrix,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
}

/// Nearest centroid, ties to the lower index.
fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = (0..points.rows())
        .map(|i| {
            let (c, d) = nearest(points.row(i), centroids);
            inertia += d;
            c
        })
        .collect();
    (labels, inertia)
}

/// Means of the assigned points. An empty cluster takes the point farthest
/// from its current centroid among clusters that can spare one.
fn update(points: &Matrix, assignments: &mut [usize], centroids: &mut Matrix) {
    let (c, k) = (centroids.rows(), centroids.cols());
    loop {
        let mut sums = Matrix::zeros(c, k);
        let mut counts = vec![0usize; c];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            for j in 0..c {
                let n = counts[j] as f64;
                for (dst, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *dst = s / n;
                }
            }
            return;
        };
        let mut far = (usize::MAX, -1.0);
        for (i, &a) in assignments.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(points.row(i), centroids.row(a));
            if d > far.1 {
                far = (i, d);
            }
        }
        assignments[far.0] = empty;
        centroids.row_mut(empty).copy_from_slice(points.row(far.0));
    }
}

/// Lloyd iterations from the given centroids. Returns the clustering and
/// the inertia after every assignment step.
pub fn lloyd(points: &Matrix, init: Matrix) -> (Clustering, Vec<f64>) {
    let mut centroids = init;
    let (mut assignments, first) = assign(points, &centroids);
    let mut trace = vec![first];
    let mut inertia = first;
    for _ in 0..KMEANS_MAX_ITERS {
        update(points, &mut assignments, &mut centroids);
        let (next, next_inertia) = assign(points, &centroids);
        trace.push(next_inertia);
        inertia = next_inertia;
        if next == assignments {
            break;
        }
        assignments = next;
    }
    (Clustering { assignments, centroids, inertia }, trace)
}

fn plus_plus<R: Rng>(points: &Matrix, c: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(c, points.cols());
    centroids.row_mut(0).copy_from_slice(points.row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for j in 1..c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(j).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(j)));
        }
    }
    centroids
}

/// k-means++ seeding and Lloyd iterations, keeping the lowest-inertia run out
/// of `restarts`.
pub fn kmeans(cloud: &LatentCloud, c: usize, restarts: usize, seed: u64) -> Result<Clustering> {
    let n = cloud.len();
    ensure(c >= 1 && c <= n, || format!("cluster count {c} must lie in [1, {n}]"))?;
    ensure(restarts >= 1, || "restarts must be at least 1".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts {
        let init = plus_plus(&cloud.points, c, &mut rng);
        let (run, _) = lloyd(&cloud.points, init);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::purity;
    use rand_distr::StandardNormal;

    fn cloud(rows: Vec<Vec<f64>>) -> LatentCloud {
        LatentCloud::from_points(Matrix::from_rows(&rows).unwrap(), 0).unwrap()
    }

    fn two_blobs(seed: u64) -> (LatentCloud, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for b in 0..2 {
            for _ in 0..40 {
                let mut r: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
                r[0] += 10.0 * b as f64;
                rows.push(r);
                labels.push(b);
            }
        }
        (cloud(rows), labels)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let (c, _) = two_blobs(0);
        let k = kmeans(&c, 1, 3, 1).unwrap();
        let n = c.len() as f64;
        let mut total = 0.0;
        for d in 0..4 {
            let mean = (0..c.len()).map(|i| c.points.get(i, d)).sum::<f64>() / n;
            assert!((k.centroids.get(0, d) - mean).abs() < 1e-12);
            total += (0..c.len()).map(|i| (c.points.get(i, d) - mean).powi(2)).sum::<f64>();
        }
        assert!((k.inertia - total).abs() < 1e-9);
        assert!(k.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn separated_blobs_are_pure() {
        let (c, labels) = two_blobs(1);
        let k = kmeans(&c, 2, 5, 2).unwrap();
        assert_eq!(purity(&k.assignments, &labels).unwrap(), 1.0);
    }

    #[test]
    fn two_points_two_clusters() {
        let c = cloud(vec![vec![0.0], vec![10.0]]);
        let k = kmeans(&c, 2, 1, 0).unwrap();
        let mut cents = vec![k.centroids.get(0, 0), k.centroids.get(1, 0)];
        cents.sort_by(f64::total_cmp);
        assert_eq!(cents, vec![0.0, 10.0]);
        assert_eq!(k.inertia, 0.0);
        assert!(kmeans(&c, 3, 1, 0).is_err());
    }

    #[test]
    fn inertia_matches_nearest_distances_and_never_rises() {
        for seed in 0..10 {
            let (c, _) = two_blobs(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = plus_plus(&c.points, 4, &mut rng);
            let (k, trace) = lloyd(&c.points, init);
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{trace:?}");
            }
            let direct: f64 = (0..c.len()).map(|i| nearest(c.points.row(i), &k.centroids).1).sum();
            assert!((k.inertia - direct).abs() < 1e-9);
            assert!(k.assignments.iter().all(|&a| a < 4));
        }
    }

    #[test]
    fn empty_cluster_is_repaired() {
        // Both initial centroids sit on the left group, so the second starts empty.
        let pts = Matrix::from_rows(&[vec![0.0], vec![0.1], vec![5.0], vec![5.2]]).unwrap();
        let init = Matrix::from_rows(&[vec![0.0], vec![-100.0]]).unwrap();
        let (k, _) = lloyd(&pts, init);
        let mut counts = [0; 2];
        k.assignments.iter().for_each(|&a| counts[a] += 1);
        assert!(counts.iter().all(|&n| n > 0), "{k:?}");
    }

    #[test]
    fn ties_go_to_lower_centroid() {
        let cents = Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(nearest(&[0.0], &cents).0, 0);
    }

    #[test]
    fn deterministic_per_seed() {
        let (c, _) = two_blobs(3);
        assert_eq!(kmeans(&c, 3, 4, 11).unwrap(), kmeans(&c, 3, 4, 11).unwrap());
    }
}
