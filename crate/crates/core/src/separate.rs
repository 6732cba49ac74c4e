//! Source reconstruction from latent regions, and scoring against references.
//!
//! Frames are assigned to latent regions by clustering posterior means.
//! Each region becomes one output source, rendered either by gating whole
//! mixture frames ([`MaskMode::Hard`]) or by a per-bin ratio mask built from
//! the decoded region centroids ([`MaskMode::Wiener`]). Both modes reuse the
//! mixture phase and the masks of all sources sum to one in every bin.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;

use crate::dsp::{denormalize_values, istft, stft, ComplexSpectrogram, FeatureFrame, FeatureStats};
use crate::error::{ensure, invalid, Error, Result};
use crate::latent::{kmeans, LatentCloud};
use crate::nngrad::Matrix;
use crate::vae::{posterior_means, VaeModel};

/// Largest source count handled by the exhaustive permutation search.
pub const MAX_SOURCES: usize = 4;
/// Magnitude floor used by [`log_spectral_distance`].
pub const LSD_FLOOR: f64 = 1e-5;
const SENTINEL_ENERGY: f64 = 1e-30;
const WIENER_DENOM_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Hard,
    Wiener,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Hard => "hard",
            MaskMode::Wiener => "wiener",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(MaskMode::Hard),
            "wiener" => Ok(MaskMode::Wiener),
            _ => Err(invalid(format!("unknown mask mode '{s}' (expected hard or wiener)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameAssignment {
    pub ids: Vec<usize>,
    pub mode: MaskMode,
    pub cluster_count: usize,
    /// Latent centroid of each cluster (`c x k`).
    pub centroids: Matrix,
}

impl FrameAssignment {
    /// Assignment from externally supplied ids (e.g. ground-truth labels).
    /// Centroids are the per-cluster means of `means`, when given.
    pub fn from_ids(ids: Vec<usize>, cluster_count: usize, mode: MaskMode, means: Option<&Matrix>) -> Result<Self> {
        ensure(cluster_count >= 1, || "cluster count must be at least 1".into())?;
        if let Some(bad) = ids.iter().find(|&&i| i >= cluster_count) {
            return Err(invalid(format!("frame id {bad} outside [0, {cluster_count})")));
        }
        let centroids = match means {
            Some(m) => {
                ensure(m.rows() == ids.len(), || format!("{} means for {} frames", m.rows(), ids.len()))?;
                let mut c = Matrix::zeros(cluster_count, m.cols());
                let mut counts = vec![0usize; cluster_count];
                for (r, &id) in ids.iter().enumerate() {
                    counts[id] += 1;
                    for (dst, v) in c.row_mut(id).iter_mut().zip(m.row(r)) {
                        *dst += v;
                    }
                }
                for (id, &n) in counts.iter().enumerate() {
                    if n > 0 {
                        c.row_mut(id).iter_mut().for_each(|v| *v /= n as f64);
                    }
                }
                c
            }
            None => Matrix::zeros(cluster_count, 0),
        };
        Ok(Self { ids, mode, cluster_count, centroids })
    }
}

/// Encodes every frame, clusters the posterior means and labels each frame
/// with its cluster.
pub fn assign_frames(
    model: &VaeModel,
    frames: &[FeatureFrame],
    cluster_count: usize,
    restarts: usize,
    seed: u64,
    mode: MaskMode,
) -> Result<FrameAssignment> {
    if let Some(f) = frames.iter().find(|f| f.values.len() != model.input_dim()) {
        return Err(invalid(format!(
            "frame {} has {} bins but the model was trained on {}",
            f.frame_index,
            f.values.len(),
            model.input_dim()
        )));
    }
    let means = posterior_means(model, frames)?;
    let cloud = LatentCloud::new(means, 0, frames.iter().map(|f| f.frame_index).collect())?;
    let clustering = kmeans(&cloud, cluster_count, restarts, seed)?;
    Ok(FrameAssignment {
        ids: clustering.assignments,
        mode,
        cluster_count,
        centroids: clustering.centroids,
    })
}

/// Per-source, per-bin masks, source-major: `sources x frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceMasks {
    pub sources: usize,
    pub frames: usize,
    pub bins: usize,
    data: Vec<f64>,
}

impl SourceMasks {
    pub fn frame(&self, source: usize, t: usize) -> &[f64] {
        let start = (source * self.frames + t) * self.bins;
        &self.data[start..start + self.bins]
    }

    /// Mean mask value of one source over one frame.
    pub fn frame_mean(&self, source: usize, t: usize) -> f64 {
        self.frame(source, t).iter().sum::<f64>() / self.bins as f64
    }
}

/// Magnitudes predicted by decoding each cluster centroid.
pub fn centroid_magnitudes(model: &VaeModel, assignment: &FrameAssignment, stats: &FeatureStats) -> Result<Vec<Vec<f64>>> {
    ensure(assignment.centroids.cols() == model.latent_dim(), || {
        format!(
            "assignment centroids have {} dimensions, model latent has {}",
            assignment.centroids.cols(),
            model.latent_dim()
        )
    })?;
    let decoded = model.decode_batch(&assignment.centroids)?;
    Ok((0..decoded.rows())
        .map(|c| denormalize_values(decoded.row(c), stats).into_iter().map(f64::exp).collect())
        .collect())
}

pub fn compute_masks(
    mix_spec: &ComplexSpectrogram,
    model: &VaeModel,
    assignment: &FrameAssignment,
    stats: &FeatureStats,
) -> Result<SourceMasks> {
    let (frames, bins, c) = (mix_spec.frames(), mix_spec.freq_bins(), assignment.cluster_count);
    ensure(assignment.ids.len() == frames, || {
        format!("assignment covers {} frames, spectrogram has {frames}", assignment.ids.len())
    })?;
    ensure(stats.dim() == bins && model.input_dim() == bins, || {
        format!(
            "spectrogram has {bins} bins but the model expects {} (stats {})",
            model.input_dim(),
            stats.dim()
        )
    })?;
    let mut data = vec![0.0; c * frames * bins];
    match assignment.mode {
        MaskMode::Hard => {
            for (t, &id) in assignment.ids.iter().enumerate() {
                let start = (id * frames + t) * bins;
                data[start..start + bins].iter_mut().for_each(|m| *m = 1.0);
            }
        }
        MaskMode::Wiener => {
            let mags = centroid_magnitudes(model, assignment, stats)?;
            let mut per_bin = vec![vec![0.0; bins]; c];
            for b in 0..bins {
                let denom: f64 = mags.iter().map(|m| m[b] * m[b]).sum();
                for s in 0..c {
                    per_bin[s][b] = if denom < WIENER_DENOM_MIN || !denom.is_finite() {
                        1.0 / c as f64
                    } else {
                        mags[s][b] * mags[s][b] / denom
                    };
                }
            }
            for s in 0..c {
                for t in 0..frames {
                    let start = (s * frames + t) * bins;
                    data[start..start + bins].copy_from_slice(&per_bin[s]);
                }
            }
        }
    }
    Ok(SourceMasks { sources: c, frames, bins, data })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub mode: MaskMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedSources {
    pub signals: Vec<Vec<f64>>,
    pub sample_rate: u32,
    pub provenance: Provenance,
    pub masks: SourceMasks,
}

/// Applies masks to the mixture spectrogram and resynthesises every source.
pub fn apply_masks(mix_spec: &ComplexSpectrogram, masks: &SourceMasks) -> Result<Vec<Vec<f64>>> {
    ensure(masks.frames == mix_spec.frames() && masks.bins == mix_spec.freq_bins(), || {
        "mask geometry does not match the spectrogram".into()
    })?;
    (0..masks.sources)
        .map(|s| {
            let mut spec = mix_spec.clone();
            for t in 0..spec.frames() {
                let m = masks.frame(s, t);
                for (bin, &w) in spec.frame_mut(t).iter_mut().zip(m) {
                    *bin = *bin * w;
                }
            }
            istft(&spec)
        })
        .collect()
}

pub fn reconstruct(
    mix_spec: &ComplexSpectrogram,
    model: &VaeModel,
    assignment: &FrameAssignment,
    stats: &FeatureStats,
    checkpoint_id: &str,
) -> Result<SeparatedSources> {
    let masks = compute_masks(mix_spec, model, assignment, stats)?;
    let signals = apply_masks(mix_spec, &masks)?;
    Ok(SeparatedSources {
        signals,
        sample_rate: mix_spec.sample_rate,
        provenance: Provenance { checkpoint_id: checkpoint_id.to_string(), mode: assignment.mode },
        masks,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB. Returns `-inf` when the projection onto the
/// reference vanishes (checked first, so an all-zero estimate scores `-inf`)
/// and `+inf` when the residual vanishes.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    ensure(est.len() == reference.len(), || {
        format!("estimate has {} samples, reference {}", est.len(), reference.len())
    })?;
    let ref_energy = dot(reference, reference);
    ensure(ref_energy > 0.0, || "reference signal is all zeros".into())?;
    let alpha = dot(est, reference) / ref_energy;
    let (mut s_energy, mut e_energy) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let s = alpha * r;
        s_energy += s * s;
        e_energy += (e - s) * (e - s);
    }
    if s_energy < SENTINEL_ENERGY {
        Ok(f64::NEG_INFINITY)
    } else if e_energy < SENTINEL_ENERGY {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (s_energy / e_energy).log10())
    }
}

/// RMS over time-frequency bins of the dB difference between magnitude
/// spectrograms, magnitudes floored at [`LSD_FLOOR`].
pub fn log_spectral_distance(est: &[f64], reference: &[f64], n_fft: usize, hop: usize) -> Result<f64> {
    ensure(est.len() == reference.len(), || {
        format!("estimate has {} samples, reference {}", est.len(), reference.len())
    })?;
    ensure(est.len() >= n_fft, || format!("signals of {} samples are shorter than n_fft = {n_fft}", est.len()))?;
    let a = stft(est, 1, n_fft, hop)?;
    let b = stft(reference, 1, n_fft, hop)?;
    let db = |c: &Complex64| 20.0 * c.norm().max(LSD_FLOOR).log10();
    let sum: f64 = a.bins().iter().zip(b.bins()).map(|(x, y)| (db(x) - db(y)).powi(2)).sum();
    Ok((sum / a.bins().len() as f64).sqrt())
}

/// Scores for one reference under the chosen permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceScore {
    pub reference: usize,
    pub estimate: usize,
    pub si_sdr: f64,
    pub si_sdr_mixture: f64,
    pub si_sdr_improvement: f64,
    pub lsd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    /// One entry per reference, in reference order.
    pub scores: Vec<SourceScore>,
    /// `permutation[r]` is the estimate paired with reference `r`.
    pub permutation: Vec<usize>,
    pub permutations_evaluated: usize,
    pub purity: Option<f64>,
    pub mode: Option<MaskMode>,
}

impl SeparationReport {
    pub fn mean_si_sdr(&self) -> f64 {
        self.scores.iter().map(|s| s.si_sdr).sum::<f64>() / self.scores.len() as f64
    }

    pub fn mean_improvement(&self) -> f64 {
        self.scores.iter().map(|s| s.si_sdr_improvement).sum::<f64>() / self.scores.len() as f64
    }
}

/// All orderings of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

fn improvement(est: f64, mix: f64) -> f64 {
    if est.is_infinite() && mix.is_infinite() && est.signum() == mix.signum() {
        0.0
    } else {
        est - mix
    }
}

/// Dominance-free score for ranking permutations; infinite sentinels count
/// as +/-1000 dB so a mix of them still orders sensibly.
fn ranking_value(v: f64) -> f64 {
    v.clamp(-1000.0, 1000.0)
}

/// Pairs estimates with references by exhaustive search over permutations,
/// maximising mean SI-SDR. References and mixture are trimmed to the
/// estimate length.
pub fn evaluate(
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
    mixture: &[f64],
    n_fft: usize,
    hop: usize,
) -> Result<SeparationReport> {
    let n = references.len();
    ensure(estimates.len() == n, || format!("{} estimates for {n} references", estimates.len()))?;
    ensure((1..=MAX_SOURCES).contains(&n), || format!("source count {n} outside 1..={MAX_SOURCES}"))?;
    let len = estimates[0].len();
    ensure(estimates.iter().all(|e| e.len() == len), || "estimates differ in length".into())?;
    ensure(references.iter().all(|r| r.len() >= len) && mixture.len() >= len, || {
        format!("references and mixture must have at least {len} samples")
    })?;
    let refs: Vec<&[f64]> = references.iter().map(|r| &r[..len]).collect();
    let mix = &mixture[..len];

    // sdr[r][e]
    let mut sdr = vec![vec![0.0; n]; n];
    for (r, reference) in refs.iter().enumerate() {
        for (e, est) in estimates.iter().enumerate() {
            sdr[r][e] = si_sdr(est, reference)?;
        }
    }
    let perms = permutations(n);
    let mut best: Option<(f64, &Vec<usize>)> = None;
    for p in &perms {
        let score: f64 = (0..n).map(|r| ranking_value(sdr[r][p[r]])).sum::<f64>() / n as f64;
        if best.map_or(true, |(b, _)| score > b) {
            best = Some((score, p));
        }
    }
    let permutation = best.expect("at least one permutation").1.clone();

    let scores = refs
        .iter()
        .enumerate()
        .map(|(r, reference)| {
            let e = permutation[r];
            let mix_sdr = si_sdr(mix, reference)?;
            Ok(SourceScore {
                reference: r,
                estimate: e,
                si_sdr: sdr[r][e],
                si_sdr_mixture: mix_sdr,
                si_sdr_improvement: improvement(sdr[r][e], mix_sdr),
                lsd: log_spectral_distance(&estimates[e], reference, n_fft, hop)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparationReport { scores, permutation, permutations_evaluated: perms.len(), purity: None, mode: None })
}
