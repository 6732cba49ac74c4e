//! Structure of the learned latent space: t-SNE projection, k-means regions
//! and cluster-quality scores.

mod kmeans;
mod metrics;
mod tsne;

pub use kmeans::{kmeans, lloyd, Clustering, KMEANS_MAX_ITERS};
pub use metrics::{purity, silhouette};
pub use tsne::{row_affinities, symmetric_affinities, tsne, Embedding2D, RowAffinities, TsneConfig, TsneOutput};

use crate::error::{ensure, Result};
use crate::nngrad::Matrix;

/// Posterior means of a set of frames at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCloud {
    /// `N x k`, one row per frame.
    pub points: Matrix,
    pub epoch: usize,
    /// Spectrogram column of each row.
    pub frame_indices: Vec<usize>,
}

impl LatentCloud {
    pub fn new(points: Matrix, epoch: usize, frame_indices: Vec<usize>) -> Result<Self> {
        ensure(points.rows() == frame_indices.len(), || {
            format!("{} points but {} frame indices", points.rows(), frame_indices.len())
        })?;
        ensure(points.is_finite(), || "latent points must be finite".into())?;
        Ok(Self { points, epoch, frame_indices })
    }

    /// Cloud whose frame indices are simply `0..N`.
    pub fn from_points(points: Matrix, epoch: usize) -> Result<Self> {
        let n = points.rows();
        Self::new(points, epoch, (0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
