use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{sq_dist, LatentCloud};
use crate::error::{ensure, invalid, Result};
use crate::nngrad::Matrix;

const BISECTION_STEPS: usize = 30;
const ENTROPY_TOL: f64 = 1e-5;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iters: usize,
    /// Gradient step; clouds smaller than this use a step of `N` instead,
    /// since the attractive update overshoots once `4 * lr / N` grows past ~4.
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities and the initial momentum.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// KL(P || Q) is recorded every `log_every` iterations and at the end.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iters: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            log_every: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    /// `N x 2`.
    pub coords: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneOutput {
    pub embedding: Embedding2D,
    /// `(iteration, KL(P || Q))`, iterations counted from 1.
    pub kl_trace: Vec<(usize, f64)>,
}

/// Conditional affinities of one point to its neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct RowAffinities {
    pub probs: Vec<f64>,
    /// Shannon entropy in nats.
    pub entropy: f64,
    /// Gaussian precision `1 / (2 sigma^2)` that was found.
    pub beta: f64,
}

fn row_at(sq_dists: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let dmin = sq_dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = sq_dists.iter().map(|d| (-(d - dmin) * beta).exp()).collect();
    let sum: f64 = p.iter().sum();
    let mut weighted = 0.0;
    for (pi, d) in p.iter_mut().zip(sq_dists) {
        *pi /= sum;
        weighted += *pi * (d - dmin);
    }
    (p, sum.ln() + beta * weighted)
}

/// Bisection on the Gaussian precision so the row's entropy matches
/// `ln(perplexity)`. `sq_dists` excludes the point itself.
pub fn row_affinities(sq_dists: &[f64], perplexity: f64) -> Result<RowAffinities> {
    ensure(!sq_dists.is_empty(), || "a point needs at least one neighbour".into())?;
    ensure(perplexity > 0.0 && perplexity.is_finite(), || {
        format!("perplexity must be positive, got {perplexity}")
    })?;
    let target = perplexity.ln();
    let (mut lo, mut hi) = (None::<f64>, None::<f64>);
    let mut beta = 1.0;
    let (mut probs, mut entropy) = row_at(sq_dists, beta);
    for _ in 0..BISECTION_STEPS {
        let diff = entropy - target;
        if diff.abs() < ENTROPY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = Some(beta);
            beta = hi.map_or(beta * 2.0, |h| (beta + h) / 2.0);
        } else {
            hi = Some(beta);
            beta = lo.map_or(beta / 2.0, |l| (beta + l) / 2.0);
        }
        (probs, entropy) = row_at(sq_dists, beta);
    }
    Ok(RowAffinities { probs, entropy, beta })
}

/// Symmetrised joint affinities `(P_j|i + P_i|j) / 2N`, dense `N x N`.
pub fn symmetric_affinities(points: &Matrix, perplexity: f64) -> Result<Vec<f64>> {
    let n = points.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(points.row(i), points.row(j))).collect();
            row_affinities(&d, perplexity).map(|r| r.probs)
        })
        .collect::<Result<_>>()?;
    let mut p = vec![0.0; n * n];
    for (i, row) in rows.iter().enumerate() {
        for (idx, &v) in row.iter().enumerate() {
            let j = if idx < i { idx } else { idx + 1 };
            p[i * n + j] += v;
            p[j * n + i] += v;
        }
    }
    let scale = 1.0 / (2.0 * n as f64);
    p.iter_mut().for_each(|v| *v *= scale);
    Ok(p)
}

/// Exact t-SNE of the cloud into two dimensions.
pub fn tsne(cloud: &LatentCloud, cfg: &TsneConfig) -> Result<TsneOutput> {
    let n = cloud.len();
    ensure(3.0 * cfg.perplexity < n as f64, || {
        format!("perplexity {} is too large for {n} points (need 3 * perplexity < N)", cfg.perplexity)
    })?;
    ensure(cfg.iters >= 250, || format!("t-SNE needs at least 250 iterations, got {}", cfg.iters))?;
    ensure(cfg.log_every > 0, || "log_every must be positive".into())?;
    let pts = &cloud.points;
    if (1..n).all(|i| pts.row(i) == pts.row(0)) {
        return Err(invalid("all latent points are identical; jitter them before embedding"));
    }

    let p = symmetric_affinities(pts, cfg.perplexity)?;
    let learning_rate = effective_learning_rate(cfg, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<f64> = (0..2 * n).map(|_| init.sample(&mut rng)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut kl_trace = Vec::new();

    for it in 1..=cfg.iters {
        let early = it <= cfg.exaggeration_iters;
        let exaggeration = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early { cfg.initial_momentum } else { cfg.final_momentum };

        let z = student_normaliser(&y, n);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (yi0, yi1) = (y[2 * i], y[2 * i + 1]);
                let mut g = [0.0; 2];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let (d0, d1) = (yi0 - y[2 * j], yi1 - y[2 * j + 1]);
                    let num = 1.0 / (1.0 + d0 * d0 + d1 * d1);
                    let coef = (exaggeration * p[i * n + j] - num / z) * num;
                    g[0] += coef * d0;
                    g[1] += coef * d1;
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();

        for (idx, g) in grad.iter().flat_map(|g| g.iter()).enumerate() {
            gains[idx] = if (*g > 0.0) != (update[idx] > 0.0) {
                gains[idx] + 0.2
            } else {
                (gains[idx] * 0.8).max(MIN_GAIN)
            };
            update[idx] = momentum * update[idx] - learning_rate * gains[idx] * g;
            y[idx] += update[idx];
        }
        center(&mut y, n);

        if it % cfg.log_every == 0 || it == cfg.iters {
            let kl = kl_divergence(&p, &y, n);
            if !kl.is_finite() {
                return Err(crate::Error::Numeric(format!("t-SNE KL divergence became non-finite at iteration {it}")));
            }
            kl_trace.push((it, kl));
        }
    }

    Ok(TsneOutput { embedding: Embedding2D { coords: Matrix::from_vec(n, 2, y)? }, kl_trace })
}

fn effective_learning_rate(cfg: &TsneConfig, n: usize) -> f64 {
    cfg.learning_rate.min(n as f64)
}

/// `Z = sum_{i != j} 1 / (1 + |y_i - y_j|^2)`, summed in index order.
fn student_normaliser(y: &[f64], n: usize) -> f64 {
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let (d0, d1) = (y[2 * i] - y[2 * j], y[2 * i + 1] - y[2 * j + 1]);
                    1.0 / (1.0 + d0 * d0 + d1 * d1)
                })
                .sum()
        })
        .collect();
    rows.iter().sum()
}

fn kl_divergence(p: &[f64], y: &[f64], n: usize) -> f64 {
    let z = student_normaliser(y, n);
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                let pij = p[i * n + j];
                if j == i || pij <= 0.0 {
                    continue;
                }
                let (d0, d1) = (y[2 * i] - y[2 * j], y[2 * i + 1] - y[2 * j + 1]);
                let q = (1.0 / (1.0 + d0 * d0 + d1 * d1) / z).max(f64::MIN_POSITIVE);
                acc += pij * (pij / q).ln();
            }
            acc
        })
        .collect();
    rows.iter().sum()
}

fn center(y: &mut [f64], n: usize) {
    let (mut m0, mut m1) = (0.0, 0.0);
    for i in 0..n {
        m0 += y[2 * i];
        m1 += y[2 * i + 1];
    }
    m0 /= n as f64;
    m1 /= n as f64;
    for i in 0..n {
        y[2 * i] -= m0;
        y[2 * i + 1] -= m1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::silhouette;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Three unit-variance blobs in 8-D, centres 10 apart along distinct axes.
    pub(crate) fn blobs(per: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let s = 10.0 / std::f64::consts::SQRT_2;
        for b in 0..3 {
            for _ in 0..per {
                let mut r: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
                r[b] += s;
                rows.push(r);
                labels.push(b);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn uniform_distances_give_uniform_rows_at_full_perplexity() {
        // Every row sees the same distance to all 9 neighbours, so the only
        // attainable entropy is log(9) and the row must be uniform.
        let d = vec![2.5; 9];
        let r = row_affinities(&d, 9.0).unwrap();
        assert!((r.entropy / std::f64::consts::LN_2 - 9f64.log2()).abs() < 1e-4);
        assert!(r.probs.iter().all(|p| (p - 1.0 / 9.0).abs() < 1e-6));
    }

    #[test]
    fn bisection_matches_target_entropy() {
        let d: Vec<f64> = (1..60).map(|i| (i as f64 * 0.37).powi(2)).collect();
        for perp in [2.0, 5.0, 10.0, 19.0] {
            let r = row_affinities(&d, perp).unwrap();
            assert!((r.entropy / std::f64::consts::LN_2 - perp.log2()).abs() < 1e-4, "perp {perp}: {}", r.entropy);
            assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_affinities_are_a_symmetric_distribution() {
        let (pts, _) = blobs(10, 1);
        let p = symmetric_affinities(&pts, 5.0).unwrap();
        let n = pts.rows();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..n {
            assert_eq!(p[i * n + i], 0.0);
            for j in 0..n {
                assert!(p[i * n + j] >= 0.0);
                assert_eq!(p[i * n + j], p[j * n + i]);
            }
        }
    }

    #[test]
    fn separates_blobs() {
        let (pts, labels) = blobs(30, 2);
        let cloud = LatentCloud::from_points(pts, 0).unwrap();
        let cfg = TsneConfig { perplexity: 20.0, seed: 3, ..Default::default() };
        let out = tsne(&cloud, &cfg).unwrap();
        let s = silhouette(&out.embedding.coords, &labels).unwrap();
        assert!(s > 0.6, "silhouette {s}");
        let c = &out.embedding.coords;
        let (m0, m1) = (0..c.rows()).fold((0.0, 0.0), |(a, b), i| (a + c.get(i, 0), b + c.get(i, 1)));
        assert!(m0.abs() / 90.0 < 1e-6 && m1.abs() / 90.0 < 1e-6);
        assert!(out.kl_trace.iter().all(|(_, kl)| kl.is_finite()));
        assert_eq!(out.kl_trace.last().unwrap().0, 1000);
    }

    #[test]
    fn deterministic_per_seed() {
        let (pts, _) = blobs(12, 4);
        let cloud = LatentCloud::from_points(pts, 0).unwrap();
        let cfg = TsneConfig { perplexity: 5.0, iters: 300, seed: 9, ..Default::default() };
        assert_eq!(tsne(&cloud, &cfg).unwrap(), tsne(&cloud, &cfg).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let (pts, _) = blobs(5, 0);
        let cloud = LatentCloud::from_points(pts, 0).unwrap();
        assert!(tsne(&cloud, &TsneConfig { perplexity: 5.0, ..Default::default() }).is_err());
        assert!(tsne(&cloud, &TsneConfig { perplexity: 2.0, iters: 100, ..Default::default() }).is_err());
        let same = LatentCloud::from_points(Matrix::from_rows(&vec![vec![1.0, 2.0]; 20]).unwrap(), 0).unwrap();
        assert!(tsne(&same, &TsneConfig { perplexity: 2.0, ..Default::default() }).is_err());
    }

    #[test]
    fn kl_decreases_late_in_most_runs() {
        let (pts, _) = blobs(30, 5);
        let cloud = LatentCloud::from_points(pts, 0).unwrap();
        let mut decreasing = 0;
        for seed in 0..20 {
            let cfg = TsneConfig { perplexity: 20.0, seed, ..Default::default() };
            let trace = tsne(&cloud, &cfg).unwrap().kl_trace;
            let at = |it: usize| trace.iter().find(|(i, _)| *i == it).unwrap().1;
            if at(1000) < at(900) {
                decreasing += 1;
            }
        }
        assert!(decreasing >= 18, "{decreasing}/20 runs decreased");
    }

    #[test]
    fn step_size_is_capped_by_cloud_size() {
        let cfg = TsneConfig::default();
        assert_eq!(effective_learning_rate(&cfg, 90), 90.0);
        assert_eq!(effective_learning_rate(&cfg, 3000), 200.0);
    }
}
