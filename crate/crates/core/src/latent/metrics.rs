use std::collections::BTreeMap;

use rayon::prelude::*;

use super::sq_dist;
use crate::error::{ensure, Result};
use crate::nngrad::Matrix;

/// Fraction of points that carry their cluster's majority label.
pub fn purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    ensure(assignments.len() == labels.len(), || {
        format!("{} assignments but {} labels", assignments.len(), labels.len())
    })?;
    ensure(!labels.is_empty(), || "purity of an empty set is undefined".into())?;
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *counts.entry(a).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / labels.len() as f64)
}

/// Mean silhouette coefficient with Euclidean distances. Points alone in
/// their cluster score 0.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> Result<f64> {
    let n = points.rows();
    ensure(labels.len() == n, || format!("{} labels for {n} points", labels.len()))?;
    ensure(n >= 3, || format!("silhouette needs at least 3 points, got {n}"))?;
    let ids: Vec<usize> = labels.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    ensure(ids.len() >= 2, || "silhouette needs at least two distinct labels".into())?;
    let slot: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(s, &l)| (l, s)).collect();
    let mut sizes = vec![0usize; ids.len()];
    for l in labels {
        sizes[slot[l]] += 1;
    }

    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = slot[&labels[i]];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; ids.len()];
            for j in 0..n {
                if j != i {
                    sums[slot[&labels[j]]] += sq_dist(points.row(i), points.row(j)).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..ids.len())
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}
