//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::wav::WavEncoding;
use crate::dsp::{is_cola, Window};
use crate::error::{ensure, invalid, Result};
use crate::latent::TsneConfig;
use crate::nngrad::AdamConfig;
use crate::siggen::{HeartParams, LungParams};
use crate::vae::{Architecture, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub floor: f64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub snapshot_stride: usize,
    pub clusters: usize,
    pub perplexity: f64,
    pub tsne_iters: usize,
    pub restarts: usize,
    pub seed: u64,
    // Synthetic corpus.
    pub duration: f64,
    pub heart_gain: f64,
    pub lung_gain: f64,
    pub heart_bpm: f64,
    pub breaths_per_min: f64,
    pub jitter_pct: f64,
    pub wav_encoding: WavEncoding,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sample_rate: 4000,
            n_fft: 256,
            hop: 64,
            floor: 1e-5,
            latent_dim: 8,
            hidden: vec![64, 32],
            beta: 1.0,
            lr: 1e-3,
            batch: 64,
            epochs: 200,
            snapshot_stride: 10,
            clusters: 2,
            perplexity: 30.0,
            tsne_iters: 1000,
            restarts: 10,
            seed: 0,
            duration: 60.0,
            heart_gain: 1.0,
            lung_gain: 1.0,
            heart_bpm: 60.0,
            breaths_per_min: 12.0,
            jitter_pct: 0.0,
            wav_encoding: WavEncoding::Float32,
        }
    }
}

pub const KEYS: [&str; 23] = [
    "sample_rate",
    "n_fft",
    "hop",
    "floor",
    "latent_dim",
    "hidden",
    "beta",
    "lr",
    "batch",
    "epochs",
    "snapshot_stride",
    "clusters",
    "perplexity",
    "tsne_iters",
    "restarts",
    "seed",
    "duration",
    "heart_gain",
    "lung_gain",
    "heart_bpm",
    "breaths_per_min",
    "jitter_pct",
    "wav_encoding",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid(format!("config key '{key}': cannot parse '{value}'")))
}

impl RunConfig {
    /// Parses config text, starting from defaults. Unknown or repeated keys
    /// are errors; the result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected 'key = value', got '{line}'", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(invalid(format!("config line {}: key '{key}' given twice", i + 1)));
            }
            cfg.set(key, value).map_err(|e| invalid(format!("config line {}: {e}", i + 1)))?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sample_rate" => self.sample_rate = num(key, value)?,
            "n_fft" => self.n_fft = num(key, value)?,
            "hop" => self.hop = num(key, value)?,
            "floor" => self.floor = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|v| num(key, v.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "beta" => self.beta = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "snapshot_stride" => self.snapshot_stride = num(key, value)?,
            "clusters" => self.clusters = num(key, value)?,
            "perplexity" => self.perplexity = num(key, value)?,
            "tsne_iters" => self.tsne_iters = num(key, value)?,
            "restarts" => self.restarts = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "duration" => self.duration = num(key, value)?,
            "heart_gain" => self.heart_gain = num(key, value)?,
            "lung_gain" => self.lung_gain = num(key, value)?,
            "heart_bpm" => self.heart_bpm = num(key, value)?,
            "breaths_per_min" => self.breaths_per_min = num(key, value)?,
            "jitter_pct" => self.jitter_pct = num(key, value)?,
            "wav_encoding" => self.wav_encoding = value.parse()?,
            _ => return Err(invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in canonical order; values round-trip through
    /// [`RunConfig::set`] exactly.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let hidden = self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        let values = [
            self.sample_rate.to_string(),
            self.n_fft.to_string(),
            self.hop.to_string(),
            format!("{:?}", self.floor),
            self.latent_dim.to_string(),
            hidden,
            format!("{:?}", self.beta),
            format!("{:?}", self.lr),
            self.batch.to_string(),
            self.epochs.to_string(),
            self.snapshot_stride.to_string(),
            self.clusters.to_string(),
            format!("{:?}", self.perplexity),
            self.tsne_iters.to_string(),
            self.restarts.to_string(),
            self.seed.to_string(),
            format!("{:?}", self.duration),
            format!("{:?}", self.heart_gain),
            format!("{:?}", self.lung_gain),
            format!("{:?}", self.heart_bpm),
            format!("{:?}", self.breaths_per_min),
            format!("{:?}", self.jitter_pct),
            self.wav_encoding.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.sample_rate > 0, || "sample_rate must be positive".into())?;
        ensure(self.n_fft.is_power_of_two() && self.n_fft >= 4, || {
            format!("n_fft must be a power of two >= 4, got {}", self.n_fft)
        })?;
        ensure(is_cola(Window::Hann, self.n_fft, self.hop), || {
            format!("hop {} does not give constant overlap-add with n_fft {}", self.hop, self.n_fft)
        })?;
        ensure(self.floor > 0.0 && self.floor.is_finite(), || format!("floor must be positive, got {}", self.floor))?;
        self.architecture().validate()?;
        ensure(self.beta >= 0.0 && self.beta.is_finite(), || format!("beta must be non-negative, got {}", self.beta))?;
        ensure(self.lr > 0.0 && self.lr.is_finite(), || format!("lr must be positive, got {}", self.lr))?;
        for (name, v) in [
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("snapshot_stride", self.snapshot_stride),
            ("clusters", self.clusters),
            ("tsne_iters", self.tsne_iters),
            ("restarts", self.restarts),
        ] {
            ensure(v > 0, || format!("{name} must be positive"))?;
        }
        ensure(self.perplexity > 0.0 && self.perplexity.is_finite(), || {
            format!("perplexity must be positive, got {}", self.perplexity)
        })?;
        ensure(self.duration > 0.0 && self.duration.is_finite(), || {
            format!("duration must be positive, got {}", self.duration)
        })?;
        ensure(self.duration * self.sample_rate as f64 >= self.n_fft as f64, || {
            format!("duration {} s is shorter than one {}-sample frame", self.duration, self.n_fft)
        })?;
        for (name, g) in [("heart_gain", self.heart_gain), ("lung_gain", self.lung_gain)] {
            ensure(g >= 0.0 && g.is_finite(), || format!("{name} must be non-negative, got {g}"))?;
        }
        self.heart_params().validate(self.sample_rate)?;
        self.lung_params().validate(self.sample_rate)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::new(self.n_fft / 2 + 1, self.latent_dim, self.hidden.clone())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            snapshot_stride: self.snapshot_stride,
        }
    }

    pub fn tsne_config(&self) -> TsneConfig {
        TsneConfig { perplexity: self.perplexity, iters: self.tsne_iters, seed: self.seed, ..TsneConfig::default() }
    }

    pub fn heart_params(&self) -> HeartParams {
        HeartParams { rate_bpm: self.heart_bpm, jitter_pct: self.jitter_pct, ..HeartParams::default() }
    }

    pub fn lung_params(&self) -> LungParams {
        LungParams { breaths_per_min: self.breaths_per_min, ..LungParams::default() }
    }
}
