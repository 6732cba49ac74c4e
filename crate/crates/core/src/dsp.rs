//! STFT analysis, weighted overlap-add synthesis and log-magnitude features.

use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{ensure, invalid, Result};

pub const DEFAULT_N_FFT: usize = 256;
pub const DEFAULT_HOP: usize = 64;
pub const DEFAULT_FLOOR: f64 = 1e-5;
/// Smallest per-bin standard deviation used by [`normalize`].
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
}

impl Window {
    /// Periodic window coefficients of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

/// One-sided STFT, stored frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Vec<Complex64>,
    frames: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub window: Window,
}

impl ComplexSpectrogram {
    /// Builds a spectrogram from frame-major bins (`frames * (n_fft / 2 + 1)` values).
    pub fn from_frames(
        data: Vec<Complex64>,
        n_fft: usize,
        hop: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        ensure(n_fft.is_power_of_two() && n_fft >= 2, || {
            format!("n_fft must be a power of two, got {n_fft}")
        })?;
        ensure(hop > 0 && hop <= n_fft, || format!("hop {hop} must lie in (0, {n_fft}]"))?;
        let bins = n_fft / 2 + 1;
        ensure(data.len() % bins == 0, || {
            format!("{} values is not a whole number of {bins}-bin frames", data.len())
        })?;
        ensure(data.iter().all(|c| c.re.is_finite() && c.im.is_finite()), || {
            "spectrogram entries must be finite".into()
        })?;
        Ok(Self { frames: data.len() / bins, data, n_fft, hop, sample_rate, window: Window::Hann })
    }

    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        let b = self.freq_bins();
        &self.data[t * b..(t + 1) * b]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        let b = self.freq_bins();
        &mut self.data[t * b..(t + 1) * b]
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.data
    }

    /// Length of the signal [`istft`] produces.
    pub fn signal_len(&self) -> usize {
        if self.frames == 0 {
            0
        } else {
            (self.frames - 1) * self.hop + self.n_fft
        }
    }

    /// Same geometry with every bin zeroed.
    pub fn zeros_like(&self) -> Self {
        Self { data: vec![Complex64::new(0.0, 0.0); self.data.len()], ..self.clone() }
    }
}

/// Number of full frames that fit in `len` samples.
pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> usize {
    if len < n_fft {
        0
    } else {
        1 + (len - n_fft) / hop
    }
}

/// Hann-windowed one-sided STFT. Frame `t` covers `[t * hop, t * hop + n_fft)`;
/// trailing samples that do not fill a frame are dropped.
pub fn stft(
    samples: &[f64],
    sample_rate: u32,
    n_fft: usize,
    hop: usize,
) -> Result<ComplexSpectrogram> {
    ensure(n_fft.is_power_of_two() && n_fft >= 2, || {
        format!("n_fft must be a power of two, got {n_fft}")
    })?;
    ensure(hop > 0 && hop <= n_fft, || format!("hop {hop} must lie in (0, {n_fft}]"))?;
    ensure(samples.len() >= n_fft, || {
        format!("signal of {} samples is shorter than n_fft = {n_fft}", samples.len())
    })?;
    let window = Window::Hann.coefficients(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let frames = frame_count(samples.len(), n_fft, hop);
    let bins = n_fft / 2 + 1;
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        let seg = &samples[t * hop..t * hop + n_fft];
        for ((b, x), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    ComplexSpectrogram::from_frames(data, n_fft, hop, sample_rate)
}

/// Sum of shifted squared windows, if it is constant in time.
fn wola_gain(window: &[f64], hop: usize) -> Option<f64> {
    let n = window.len();
    if n % hop != 0 {
        return None;
    }
    let sums: Vec<f64> = (0..hop)
        .map(|i| window.iter().skip(i).step_by(hop).map(|w| w * w).sum())
        .collect();
    let (lo, hi) = sums
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    (lo > 0.0 && (hi - lo) <= 1e-10 * hi).then_some(hi)
}

/// Whether `hop` gives perfect weighted overlap-add reconstruction.
pub fn is_cola(window: Window, n_fft: usize, hop: usize) -> bool {
    hop > 0 && hop <= n_fft && wola_gain(&window.coefficients(n_fft), hop).is_some()
}

/// Inverse DFT of one frame: the windowed segment that produced it.
pub fn frame_inverse(spec: &ComplexSpectrogram, t: usize) -> Vec<f64> {
    let n = spec.n_fft;
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    inverse_into(spec.frame(t), &mut buf, ifft.as_ref());
    buf.iter().map(|c| c.re).collect()
}

fn inverse_into(frame: &[Complex64], buf: &mut [Complex64], ifft: &dyn rustfft::Fft<f64>) {
    let n = buf.len();
    let half = n / 2;
    buf[0] = Complex64::new(frame[0].re, 0.0);
    buf[half] = Complex64::new(frame[half].re, 0.0);
    for k in 1..half {
        buf[k] = frame[k];
        buf[n - k] = frame[k].conj();
    }
    ifft.process(buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
}

/// Weighted overlap-add inverse. Output length is `(frames - 1) * hop + n_fft`.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
    let window = spec.window.coefficients(spec.n_fft);
    let gain = wola_gain(&window, spec.hop).ok_or_else(|| {
        invalid(format!(
            "hop {} does not satisfy constant overlap-add for a {}-point Hann window",
            spec.hop, spec.n_fft
        ))
    })?;
    let n = spec.n_fft;
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut out = vec![0.0; spec.signal_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..spec.frames() {
        inverse_into(spec.frame(t), &mut buf, ifft.as_ref());
        let dst = &mut out[t * spec.hop..t * spec.hop + n];
        for ((o, b), w) in dst.iter_mut().zip(&buf).zip(&window) {
            *o += b.re * w;
        }
    }
    out.iter_mut().for_each(|x| *x /= gain);
    Ok(out)
}

/// Log-magnitude column of the spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub values: Vec<f64>,
    pub frame_index: usize,
}

/// `ln(max(|bin|, floor))` per bin, one frame per spectrogram column.
pub fn log_mag(spec: &ComplexSpectrogram, floor: f64) -> Result<Vec<FeatureFrame>> {
    ensure(floor > 0.0 && floor.is_finite(), || format!("floor must be positive, got {floor}"))?;
    Ok((0..spec.frames())
        .map(|t| FeatureFrame {
            values: spec.frame(t).iter().map(|c| c.norm().max(floor).ln()).collect(),
            frame_index: t,
        })
        .collect())
}

/// Per-bin mean and standard deviation of a frame set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_stats(frames: &[FeatureFrame]) -> Result<FeatureStats> {
    ensure(frames.len() >= 2, || {
        format!("fit_stats needs at least 2 frames, got {}", frames.len())
    })?;
    let n = frames[0].values.len();
    ensure(frames.iter().all(|f| f.values.len() == n), || {
        "frames have inconsistent lengths".into()
    })?;
    let count = frames.len() as f64;
    let mut mean = vec![0.0; n];
    for f in frames {
        for (m, v) in mean.iter_mut().zip(&f.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for f in frames {
        for ((s, v), m) in var.iter_mut().zip(&f.values).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / count).sqrt().max(STD_FLOOR)).collect();
    Ok(FeatureStats { mean, std })
}

fn check_dims(frames: &[FeatureFrame], stats: &FeatureStats) -> Result<()> {
    match frames.iter().find(|f| f.values.len() != stats.dim()) {
        Some(f) => Err(invalid(format!(
            "frame {} has {} bins, stats have {}",
            f.frame_index,
            f.values.len(),
            stats.dim()
        ))),
        None => Ok(()),
    }
}

pub fn normalize(frames: &[FeatureFrame], stats: &FeatureStats) -> Result<Vec<FeatureFrame>> {
    check_dims(frames, stats)?;
    Ok(frames
        .iter()
        .map(|f| FeatureFrame {
            values: f
                .values
                .iter()
                .zip(stats.mean.iter().zip(&stats.std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
            frame_index: f.frame_index,
        })
        .collect())
}

/// Maps one normalised vector back to log-magnitudes.
pub fn denormalize_values(values: &[f64], stats: &FeatureStats) -> Vec<f64> {
    values
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(v, (m, s))| v * s + m)
        .collect()
}

pub fn denormalize(frames: &[FeatureFrame], stats: &FeatureStats) -> Result<Vec<FeatureFrame>> {
    check_dims(frames, stats)?;
    Ok(frames
        .iter()
        .map(|f| FeatureFrame {
            values: denormalize_values(&f.values, stats),
            frame_index: f.frame_index,
        })
        .collect())
}
