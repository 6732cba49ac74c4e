//! Deterministic synthetic cardiopulmonary sources.
//!
//! Heart sounds are trains of exponentially damped sinusoid bursts (S1 then
//! S2 each cycle). Lung sounds are band-limited Gaussian noise shaped by a
//! breathing envelope. Both are peak-normalised to [`PEAK`] and depend only
//! on their parameters and seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{ensure, invalid, Result};

/// Peak amplitude every generator normalises to.
pub const PEAK: f64 = 0.9;

pub const DEFAULT_SAMPLE_RATE: u32 = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Heart,
    Lung,
    Other,
}

impl SourceKind {
    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Heart => "heart",
            SourceKind::Lung => "lung",
            SourceKind::Other => "other",
        }
    }
}

/// A single ground-truth (or externally recorded) source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub kind: SourceKind,
}

impl SourceSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32, kind: SourceKind) -> Result<Self> {
        ensure(sample_rate > 0, || "sample_rate must be positive".into())?;
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(invalid(format!(
                "sample {i} = {} is outside [-1, 1] or non-finite",
                samples[i]
            )));
        }
        Ok(Self { samples, sample_rate, kind })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Weighted sum of aligned sources.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    /// Effective per-source gains, i.e. the requested gains times `rescale`.
    pub component_gains: Vec<f64>,
    /// Global factor applied after summation (1.0 when the sum already fit in [-1, 1]).
    pub rescale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeartParams {
    pub rate_bpm: f64,
    pub s1_freq: f64,
    pub s2_freq: f64,
    /// Seconds from S1 onset to S2 onset.
    pub s1_s2_interval: f64,
    /// Exponential decay rate of each burst, 1/s.
    pub decay: f64,
    /// Uniform beat-onset jitter as a percentage of the beat period.
    pub jitter_pct: f64,
}

impl Default for HeartParams {
    fn default() -> Self {
        Self {
            rate_bpm: 60.0,
            s1_freq: 70.0,
            s2_freq: 120.0,
            s1_s2_interval: 0.3,
            decay: 35.0,
            jitter_pct: 0.0,
        }
    }
}

impl HeartParams {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        ensure(self.rate_bpm > 0.0 && self.rate_bpm.is_finite(), || {
            format!("heart rate_bpm must be positive, got {}", self.rate_bpm)
        })?;
        let period = 60.0 / self.rate_bpm;
        ensure(self.s1_s2_interval > 0.0 && self.s1_s2_interval < period, || {
            format!(
                "s1_s2_interval {} must lie in (0, {period})",
                self.s1_s2_interval
            )
        })?;
        for (name, f) in [("s1_freq", self.s1_freq), ("s2_freq", self.s2_freq)] {
            ensure(f > 0.0 && f < nyquist, || {
                format!("{name} {f} Hz must lie in (0, Nyquist = {nyquist} Hz)")
            })?;
        }
        ensure(self.decay > 0.0 && self.decay.is_finite(), || {
            format!("decay must be positive, got {}", self.decay)
        })?;
        ensure((0.0..50.0).contains(&self.jitter_pct), || {
            format!("jitter_pct must lie in [0, 50), got {}", self.jitter_pct)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LungParams {
    pub breaths_per_min: f64,
    pub band_low: f64,
    pub band_high: f64,
    /// Inhale duration divided by exhale duration.
    pub inhale_exhale_ratio: f64,
}

impl Default for LungParams {
    fn default() -> Self {
        Self {
            breaths_per_min: 12.0,
            band_low: 150.0,
            band_high: 800.0,
            inhale_exhale_ratio: 0.5,
        }
    }
}

impl LungParams {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        ensure(self.breaths_per_min > 0.0 && self.breaths_per_min.is_finite(), || {
            format!("breaths_per_min must be positive, got {}", self.breaths_per_min)
        })?;
        ensure(
            self.band_low > 0.0 && self.band_low < self.band_high && self.band_high < nyquist,
            || {
                format!(
                    "lung band must satisfy 0 < {} < {} < Nyquist = {nyquist} Hz",
                    self.band_low, self.band_high
                )
            },
        )?;
        ensure(self.inhale_exhale_ratio > 0.0 && self.inhale_exhale_ratio.is_finite(), || {
            format!("inhale_exhale_ratio must be positive, got {}", self.inhale_exhale_ratio)
        })
    }
}

fn sample_count(duration: f64, sample_rate: u32) -> Result<usize> {
    ensure(duration > 0.0 && duration.is_finite(), || {
        format!("duration must be positive, got {duration}")
    })?;
    ensure(sample_rate > 0, || "sample_rate must be positive".into())?;
    Ok((duration * sample_rate as f64).round() as usize)
}

fn peak_normalize(samples: &mut [f64]) {
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let scale = PEAK / peak;
        samples.iter_mut().for_each(|s| *s *= scale);
    }
}

/// Relative amplitude of S2 against S1.
const S2_AMPLITUDE: f64 = 0.6;

/// Generates a heart-sound train.
pub fn gen_heart(
    params: &HeartParams,
    duration: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<SourceSignal> {
    let len = sample_count(duration, sample_rate)?;
    params.validate(sample_rate)?;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];

    let period = 60.0 / params.rate_bpm;
    let burst_len = ((8.0 / params.decay) * sr).ceil() as usize;
    let mut add_burst = |onset: f64, freq: f64, amp: f64| {
        let start = (onset * sr).round();
        if start < 0.0 {
            return;
        }
        let start = start as usize;
        for (i, slot) in out.iter_mut().skip(start).take(burst_len).enumerate() {
            let t = i as f64 / sr;
            *slot += amp * (-params.decay * t).exp() * (std::f64::consts::TAU * freq * t).sin();
        }
    };

    let jitter = params.jitter_pct / 100.0 * period;
    let mut beat = 0usize;
    loop {
        let offset = if jitter > 0.0 {
            rng.gen_range(-jitter..=jitter)
        } else {
            0.0
        };
        let onset = 0.1 * period + beat as f64 * period + offset;
        if onset >= duration {
            break;
        }
        add_burst(onset, params.s1_freq, 1.0);
        add_burst(onset + params.s1_s2_interval, params.s2_freq, S2_AMPLITUDE);
        beat += 1;
    }

    peak_normalize(&mut out);
    SourceSignal::new(out, sample_rate, SourceKind::Heart)
}

/// Breathing envelope at time `t`: a half-sine per inhale and a quieter
/// half-sine per exhale, on a small constant floor.
pub fn breathing_envelope(params: &LungParams, t: f64) -> f64 {
    const FLOOR: f64 = 0.15;
    const EXHALE_LEVEL: f64 = 0.6;
    let cycle = 60.0 / params.breaths_per_min;
    let inhale = cycle * params.inhale_exhale_ratio / (1.0 + params.inhale_exhale_ratio);
    let exhale = cycle - inhale;
    let phase = t.rem_euclid(cycle);
    let shape = if phase < inhale {
        (std::f64::consts::PI * phase / inhale).sin()
    } else {
        EXHALE_LEVEL * (std::f64::consts::PI * (phase - inhale) / exhale).sin()
    };
    FLOOR + (1.0 - FLOOR) * shape
}

/// Generates band-limited breathing noise.
pub fn gen_lung(
    params: &LungParams,
    duration: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<SourceSignal> {
    let len = sample_count(duration, sample_rate)?;
    params.validate(sample_rate)?;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut buf: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, bin) in buf.iter_mut().enumerate() {
        // Frequency of bin k, folded onto [0, sr/2].
        let f = k.min(len - k) as f64 * sr / len as f64;
        if f < params.band_low || f > params.band_high {
            *bin = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);

    let mut out: Vec<f64> = buf
        .iter()
        .enumerate()
        .map(|(i, c)| c.re * breathing_envelope(params, i as f64 / sr))
        .collect();
    peak_normalize(&mut out);
    SourceSignal::new(out, sample_rate, SourceKind::Lung)
}

fn check_aligned(sources: &[SourceSignal]) -> Result<()> {
    ensure(!sources.is_empty(), || "at least one source is required".into())?;
    let (len, sr) = (sources[0].len(), sources[0].sample_rate);
    for (i, s) in sources.iter().enumerate() {
        ensure(s.len() == len, || {
            format!("source {i} has {} samples, source 0 has {len}", s.len())
        })?;
        ensure(s.sample_rate == sr, || {
            format!("source {i} sample rate {} != {sr}", s.sample_rate)
        })?;
    }
    Ok(())
}

/// Samplewise `sum_i gains[i] * sources[i]` without any rescaling.
pub fn weighted_sum(sources: &[SourceSignal], gains: &[f64]) -> Result<Vec<f64>> {
    check_aligned(sources)?;
    ensure(gains.len() == sources.len(), || {
        format!("{} gains for {} sources", gains.len(), sources.len())
    })?;
    ensure(gains.iter().all(|g| g.is_finite()), || "gains must be finite".into())?;
    let mut out = vec![0.0; sources[0].len()];
    for (src, &g) in sources.iter().zip(gains) {
        for (o, s) in out.iter_mut().zip(&src.samples) {
            *o += g * s;
        }
    }
    Ok(out)
}

/// Mixes sources, rescaling globally only when the sum would clip.
pub fn mix(sources: &[SourceSignal], gains: &[f64]) -> Result<MixtureSignal> {
    let mut samples = weighted_sum(sources, gains)?;
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let rescale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if rescale != 1.0 {
        samples.iter_mut().for_each(|s| *s *= rescale);
    }
    Ok(MixtureSignal {
        samples,
        sample_rate: sources[0].sample_rate,
        component_gains: gains.iter().map(|g| g * rescale).collect(),
        rescale,
    })
}

/// Per-frame index of the source carrying the most energy. Ties go to the
/// lowest index. Frames follow STFT framing: frame `t` covers
/// `[t * hop, t * hop + frame_len)`.
pub fn dominance_labels(
    sources: &[SourceSignal],
    frame_len: usize,
    hop: usize,
) -> Result<Vec<usize>> {
    check_aligned(sources)?;
    ensure(hop > 0 && frame_len >= hop, || {
        format!("need frame_len ({frame_len}) >= hop ({hop}) > 0")
    })?;
    let len = sources[0].len();
    if len < frame_len {
        return Ok(Vec::new());
    }
    let frames = 1 + (len - frame_len) / hop;
    Ok((0..frames)
        .map(|t| {
            let range = t * hop..t * hop + frame_len;
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, s) in sources.iter().enumerate() {
                let e: f64 = s.samples[range.clone()].iter().map(|x| x * x).sum();
                if e > best.1 {
                    best = (i, e);
                }
            }
            best.0
        })
        .collect())
}

/// Gates aligned sources so that only one is active per segment, cycling
/// through the sources in order: segment `j` keeps source `j % n`.
pub fn alternate_segments(sources: &[SourceSignal], segment: f64) -> Result<Vec<SourceSignal>> {
    check_aligned(sources)?;
    ensure(segment > 0.0, || format!("segment length must be positive, got {segment}"))?;
    let seg_len = ((segment * sources[0].sample_rate as f64).round() as usize).max(1);
    let n = sources.len();
    Ok(sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let samples = s
                .samples
                .iter()
                .enumerate()
                .map(|(t, &x)| if (t / seg_len) % n == i { x } else { 0.0 })
                .collect();
            SourceSignal { samples, sample_rate: s.sample_rate, kind: s.kind }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_rms(x: &[f64], frame: usize) -> Vec<f64> {
        x.chunks(frame)
            .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
            .collect()
    }

    /// Lag (in frames) of the largest autocorrelation value beyond `min_lag`.
    fn autocorr_peak(env: &[f64], min_lag: usize) -> usize {
        let mean = env.iter().sum::<f64>() / env.len() as f64;
        let c: Vec<f64> = env.iter().map(|v| v - mean).collect();
        (min_lag..c.len() / 2)
            .map(|lag| {
                let r: f64 = c.iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>()
                    / (c.len() - lag) as f64;
                (lag, r)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn heart_defaults_have_ten_s1_events_and_one_second_period() {
        let h = gen_heart(&HeartParams::default(), 10.0, 4000, 0).unwrap();
        // 10 ms envelope frames.
        let env = frame_rms(&h.samples, 40);
        let max = env.iter().cloned().fold(0.0, f64::max);
        // S2 peaks at 0.6 of S1, so a 0.8 threshold only fires on S1.
        let thr = 0.8 * max;
        let onsets = env
            .windows(2)
            .filter(|w| w[0] < thr && w[1] >= thr)
            .count()
            + usize::from(env[0] >= thr);
        assert_eq!(onsets, 10);
        let lag = autocorr_peak(&env, 20);
        assert_eq!(lag, 100, "autocorrelation peak at {} s", lag as f64 / 100.0);
    }

    #[test]
    fn heart_is_deterministic_and_normalised() {
        let p = HeartParams { jitter_pct: 5.0, ..Default::default() };
        let a = gen_heart(&p, 3.0, 4000, 42).unwrap();
        let b = gen_heart(&p, 3.0, 4000, 42).unwrap();
        let bits = |s: &SourceSignal| s.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let peak = a.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - PEAK).abs() < 1e-12);
        let c = gen_heart(&p, 3.0, 4000, 43).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn heart_rejects_bad_arguments() {
        let p = HeartParams::default();
        assert!(gen_heart(&p, 0.0, 4000, 0).is_err());
        assert!(gen_heart(&p, -1.0, 4000, 0).is_err());
        let hi = HeartParams { s1_freq: 2000.0, ..p };
        assert!(gen_heart(&hi, 1.0, 4000, 0).is_err());
        let long = HeartParams { s1_s2_interval: 1.0, ..p };
        assert!(gen_heart(&long, 1.0, 4000, 0).is_err());
    }

    #[test]
    fn lung_energy_stays_in_band() {
        let p = LungParams::default();
        let l = gen_lung(&p, 10.0, 4000, 1).unwrap();
        // Periodogram by naive DFT on a decimated frequency grid is too slow at
        // 40k samples, so use Welch-style averaging of 1024-point naive DFTs.
        let n = 1024;
        let mut power = vec![0.0; n / 2 + 1];
        for seg in l.samples.chunks_exact(n) {
            for (k, p) in power.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, x) in seg.iter().enumerate() {
                    let ang = -std::f64::consts::TAU * (k * t) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                *p += re * re + im * im;
            }
        }
        let df = 4000.0 / n as f64;
        let total: f64 = power.iter().sum();
        let inside: f64 = power
            .iter()
            .enumerate()
            .filter(|(k, _)| (150.0..=800.0).contains(&(*k as f64 * df)))
            .map(|(_, p)| p)
            .sum();
        assert!(inside / total >= 0.95, "in-band fraction {}", inside / total);
    }

    #[test]
    fn lung_breathing_period_matches_rate() {
        let p = LungParams { breaths_per_min: 12.0, ..Default::default() };
        let l = gen_lung(&p, 10.0, 4000, 3).unwrap();
        // 50 ms envelope frames, so 5 s == 100 frames.
        let env = frame_rms(&l.samples, 200);
        let lag = autocorr_peak(&env, 20);
        assert!((lag as i64 - 100).abs() <= 1, "peak at lag {} s", lag as f64 * 0.05);
    }

    #[test]
    fn lung_is_deterministic_and_validates_band() {
        let p = LungParams::default();
        let a = gen_lung(&p, 2.0, 4000, 9).unwrap();
        let b = gen_lung(&p, 2.0, 4000, 9).unwrap();
        assert_eq!(a, b);
        let bad = LungParams { band_high: 2000.0, ..p };
        assert!(gen_lung(&bad, 2.0, 4000, 9).is_err());
    }

    fn fixtures() -> (SourceSignal, SourceSignal) {
        (
            gen_heart(&HeartParams::default(), 2.0, 4000, 0).unwrap(),
            gen_lung(&LungParams::default(), 2.0, 4000, 0).unwrap(),
        )
    }

    #[test]
    fn mix_identity_and_zero_gain() {
        let (h, l) = fixtures();
        assert_eq!(mix(&[h.clone()], &[1.0]).unwrap().samples, h.samples);
        let m = mix(&[h.clone(), l.clone()], &[1.0, 0.0]).unwrap();
        assert_eq!(m.samples, h.samples);
        assert_eq!(m.rescale, 1.0);
    }

    #[test]
    fn mix_is_a_weighted_sum_before_rescale() {
        let (h, l) = fixtures();
        let m = mix(&[h.clone(), l.clone()], &[0.7, 0.7]).unwrap();
        for i in 0..h.len() {
            let expect = (0.7 * h.samples[i] + 0.7 * l.samples[i]) * m.rescale;
            assert!((m.samples[i] - expect).abs() < 1e-12);
        }
        assert!(m.samples.iter().all(|s| s.abs() <= 1.0));
        assert_eq!(m.component_gains, vec![0.7 * m.rescale, 0.7 * m.rescale]);
    }

    #[test]
    fn mix_rejects_misaligned_sources() {
        let (h, _) = fixtures();
        let short = SourceSignal::new(vec![0.0; 10], 4000, SourceKind::Lung).unwrap();
        assert!(mix(&[h.clone(), short], &[1.0, 1.0]).is_err());
        let other_rate = SourceSignal { sample_rate: 8000, ..h.clone() };
        assert!(mix(&[h, other_rate], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn dominance_labels_basic_rules() {
        let (h, l) = fixtures();
        let silence = SourceSignal { samples: vec![0.0; l.len()], ..l.clone() };
        let labels = dominance_labels(&[silence.clone(), l.clone()], 256, 64).unwrap();
        assert!(labels.iter().all(|&x| x == 1));
        let tied = dominance_labels(&[l.clone(), l.clone()], 256, 64).unwrap();
        assert!(tied.iter().all(|&x| x == 0));
        assert!(dominance_labels(&[], 256, 64).is_err());

        // The first S1 burst starts at 0.1 s; frame 8 covers 0.128..0.192 s,
        // where the lung floor is far below the burst.
        let quiet_lung = SourceSignal {
            samples: l.samples.iter().map(|x| x * 0.05).collect(),
            ..l.clone()
        };
        let t = 8;
        let e = |s: &SourceSignal| s.samples[t * 64..t * 64 + 256].iter().map(|x| x * x).sum::<f64>();
        assert!(e(&h) > e(&quiet_lung));
        let labels = dominance_labels(&[h, quiet_lung], 256, 64).unwrap();
        assert_eq!(labels[t], 0);
    }

    #[test]
    fn alternate_segments_gates_sources() {
        let (h, l) = fixtures();
        let gated = alternate_segments(&[h.clone(), l.clone()], 0.5).unwrap();
        assert_eq!(gated[0].samples[100], h.samples[100]);
        assert_eq!(gated[1].samples[100], 0.0);
        assert_eq!(gated[0].samples[2100], 0.0);
        assert_eq!(gated[1].samples[2100], l.samples[2100]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn weighted_sum_is_linear_in_gains(
                g1 in proptest::collection::vec(-2.0f64..2.0, 2),
                g2 in proptest::collection::vec(-2.0f64..2.0, 2),
            ) {
                let (h, l) = fixtures();
                let src = [h, l];
                let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
                let lhs = weighted_sum(&src, &sum).unwrap();
                let a = weighted_sum(&src, &g1).unwrap();
                let b = weighted_sum(&src, &g2).unwrap();
                for i in 0..lhs.len() {
                    prop_assert!((lhs[i] - (a[i] + b[i])).abs() < 1e-12);
                }
            }

            #[test]
            fn dominance_labels_follow_source_permutation(seed in 0u64..1000) {
                let h = gen_heart(&HeartParams::default(), 2.0, 4000, seed).unwrap();
                let l = gen_lung(&LungParams::default(), 2.0, 4000, seed).unwrap();
                let fwd = dominance_labels(&[h.clone(), l.clone()], 256, 64).unwrap();
                let rev = dominance_labels(&[l, h], 256, 64).unwrap();
                for (a, b) in fwd.iter().zip(&rev) {
                    prop_assert_eq!(*a, 1 - *b);
                }
            }
        }
    }
}
