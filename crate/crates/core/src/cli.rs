//! Command-line driver: `synth`, `train`, `project`, `separate`, `evaluate`.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 I/O, 4 numeric failure.
//! Failures print a single `vaesep: <kind>: <message>` line to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{fit_stats, log_mag, normalize, stft, ComplexSpectrogram, FeatureFrame};
use crate::error::{Error, Result};
use crate::io::csv::{read_usize_column, CsvData, EmbeddingRow};
use crate::io::{export_csv, load_checkpoint, read_wav, save_checkpoint, write_wav, Checkpoint, RunConfig};
use crate::latent::{kmeans, purity, tsne, LatentCloud};
use crate::nngrad::Matrix;
use crate::separate::{assign_frames, evaluate, reconstruct, MaskMode};
use crate::siggen::{alternate_segments, dominance_labels, gen_heart, gen_lung, mix, SourceSignal};
use crate::vae::{posterior_means, train_with_progress, VaeModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "vaesep", version, about = "Unsupervised heart/lung sound separation with a variational autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate heart, lung and mixture recordings plus per-frame labels.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Gate the sources into alternating single-source segments of this many seconds.
        #[arg(long)]
        alternate: Option<f64>,
    },
    /// Train the model on a mixture recording.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mixture: PathBuf,
        /// Checkpoint path; loss and latent CSVs go to the same directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cluster latent means and embed them in 2-D with t-SNE.
    Project {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-frame ground truth (labels.csv from `synth`).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Embed every n-th frame only.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Split a mixture into one recording per latent cluster.
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long, default_value = "wiener")]
        mode: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Analysis settings; must agree with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write spectrogram CSVs of the mixture and every source.
        #[arg(long)]
        spectrograms: bool,
    },
    /// Score separated sources against references.
    Evaluate {
        #[arg(long)]
        est_dir: PathBuf,
        #[arg(long)]
        ref_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `mixture.wav` in the reference directory.
        #[arg(long)]
        mixture: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::Corrupt(_) => (EXIT_IO, "io"),
        Error::Numeric(_) => (EXIT_NUMERIC, "numeric"),
        Error::InvalidArgument(_) | Error::State(_) | Error::UnsupportedFormat(_) | Error::Version { .. } => {
            (EXIT_VALIDATION, "validation")
        }
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            if code == EXIT_USAGE {
                eprintln!("vaesep: usage: {}", e.kind());
            }
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            eprintln!("vaesep: {kind}: {}", e.to_string().replace('\n', " "));
            code
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { config, out_dir, seed, alternate } => synth(&load_config(config.as_deref(), seed)?, &out_dir, alternate),
        Command::Train { config, mixture, out, seed } => train(&load_config(config.as_deref(), seed)?, &mixture, &out),
        Command::Project { ckpt, mixture, out, labels, stride } => project(&ckpt, &mixture, &out, labels.as_deref(), stride),
        Command::Separate { ckpt, mixture, mode, out_dir, config, spectrograms } => {
            separate(&ckpt, &mixture, mode.parse()?, &out_dir, config.as_deref(), spectrograms)
        }
        Command::Evaluate { est_dir, ref_dir, out, mixture, config } => {
            let cfg = load_config(config.as_deref(), None)?;
            let mixture = mixture.unwrap_or_else(|| ref_dir.join("mixture.wav"));
            eval(&cfg, &est_dir, &ref_dir, &mixture, &out)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    let line = cfg.pairs().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
    eprintln!("vaesep: config: {line}");
}

fn ensure_dir(dir: &Path) -> Result<()> {
    Ok(fs::create_dir_all(dir)?)
}

fn synth(cfg: &RunConfig, out_dir: &Path, alternate: Option<f64>) -> Result<()> {
    log_config(cfg);
    let heart = gen_heart(&cfg.heart_params(), cfg.duration, cfg.sample_rate, cfg.seed)?;
    let lung = gen_lung(&cfg.lung_params(), cfg.duration, cfg.sample_rate, cfg.seed.wrapping_add(1))?;
    let mut sources = vec![heart, lung];
    if let Some(seg) = alternate {
        sources = alternate_segments(&sources, seg)?;
    }
    let mixture = mix(&sources, &[cfg.heart_gain, cfg.lung_gain])?;
    let labels = dominance_labels(&sources, cfg.n_fft, cfg.hop)?;
    ensure_dir(out_dir)?;
    // References are written as they appear inside the mixture.
    for (src, (name, gain)) in sources.iter().zip([("heart.wav", mixture.component_gains[0]), ("lung.wav", mixture.component_gains[1])]) {
        let scaled: Vec<f64> = src.samples.iter().map(|s| s * gain).collect();
        write_wav(&out_dir.join(name), &scaled, cfg.sample_rate, cfg.wav_encoding)?;
    }
    write_wav(&out_dir.join("mixture.wav"), &mixture.samples, cfg.sample_rate, cfg.wav_encoding)?;
    export_csv(&CsvData::Labels(&labels), &out_dir.join("labels.csv"))?;
    eprintln!("vaesep: synth: wrote {} samples at {} Hz to {}", mixture.samples.len(), cfg.sample_rate, out_dir.display());
    Ok(())
}

fn read_mixture(path: &Path, sample_rate: u32) -> Result<SourceSignal> {
    let m = read_wav(path)?;
    if m.sample_rate != sample_rate {
        return Err(Error::InvalidArgument(format!(
            "mixture sample rate {} Hz does not match configured {} Hz",
            m.sample_rate, sample_rate
        )));
    }
    Ok(m)
}

fn features(samples: &[f64], cfg: &RunConfig) -> Result<(ComplexSpectrogram, Vec<FeatureFrame>)> {
    let spec = stft(samples, cfg.sample_rate, cfg.n_fft, cfg.hop)?;
    let frames = log_mag(&spec, cfg.floor)?;
    Ok((spec, frames))
}

fn train(cfg: &RunConfig, mixture: &Path, out: &Path) -> Result<()> {
    log_config(cfg);
    let m = read_mixture(mixture, cfg.sample_rate)?;
    let (_, raw) = features(&m.samples, cfg)?;
    let stats = fit_stats(&raw)?;
    let frames = normalize(&raw, &stats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = VaeModel::new(cfg.architecture(), cfg.beta, &mut rng)?;
    let tcfg = cfg.train_config();
    let outcome = train_with_progress(&mut model, &frames, &tcfg, &mut rng, |epoch, loss, _| {
        if epoch == 1 || epoch % tcfg.snapshot_stride == 0 || epoch == tcfg.epochs {
            eprintln!("vaesep: epoch {epoch}: recon {:.4} kl {:.4} total {:.4}", loss.recon, loss.kl, loss.total);
        }
    })?;

    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    ensure_dir(dir)?;
    export_csv(&CsvData::Losses(&outcome.history), &dir.join("losses.csv"))?;
    let indices: Vec<usize> = frames.iter().map(|f| f.frame_index).collect();
    for snap in &outcome.snapshots {
        let data = CsvData::Latent { epoch: snap.epoch, frame_indices: &indices, means: &snap.means };
        export_csv(&data, &dir.join(format!("latent_epoch_{:04}.csv", snap.epoch)))?;
    }
    save_checkpoint(out, &Checkpoint { model, stats, config: cfg.clone(), epoch: tcfg.epochs })?;
    eprintln!("vaesep: train: {} frames, {} steps, checkpoint {}", frames.len(), outcome.steps, out.display());
    Ok(())
}

/// Normalised frames of `mixture` under the checkpoint's analysis settings.
fn checkpoint_frames(ckpt: &Checkpoint, samples: &[f64]) -> Result<(ComplexSpectrogram, Vec<FeatureFrame>)> {
    let (spec, raw) = features(samples, &ckpt.config)?;
    Ok((spec, normalize(&raw, &ckpt.stats)?))
}

fn project(ckpt_path: &Path, mixture: &Path, out: &Path, labels: Option<&Path>, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let ckpt = load_checkpoint(ckpt_path)?;
    let cfg = &ckpt.config;
    log_config(cfg);
    let m = read_mixture(mixture, cfg.sample_rate)?;
    let (_, frames) = checkpoint_frames(&ckpt, &m.samples)?;
    let truth = labels.map(|p| read_usize_column(p, "label")).transpose()?;
    if let Some(t) = &truth {
        if t.len() != frames.len() {
            return Err(Error::InvalidArgument(format!("{} labels for {} frames", t.len(), frames.len())));
        }
    }
    let means = posterior_means(&ckpt.model, &frames)?;
    let clustering = kmeans(&LatentCloud::from_points(means.clone(), ckpt.epoch)?, cfg.clusters, cfg.restarts, cfg.seed)?;

    let picked: Vec<usize> = (0..frames.len()).step_by(stride).collect();
    let sub = Matrix::from_rows(&picked.iter().map(|&i| means.row(i)).collect::<Vec<_>>())?;
    let cloud = LatentCloud::new(sub, ckpt.epoch, picked.clone())?;
    let emb = tsne(&cloud, &cfg.tsne_config())?;
    let rows: Vec<EmbeddingRow> = picked
        .iter()
        .enumerate()
        .map(|(r, &i)| EmbeddingRow {
            frame_index: i,
            x: emb.embedding.coords.get(r, 0),
            y: emb.embedding.coords.get(r, 1),
            cluster: clustering.assignments[i],
            true_label: truth.as_ref().map(|t| t[i]),
            epoch: ckpt.epoch,
        })
        .collect();
    export_csv(&CsvData::Embedding(&rows), out)?;
    if let Some(t) = &truth {
        eprintln!("vaesep: project: cluster purity {:.4}", purity(&clustering.assignments, t)?);
    }
    Ok(())
}

/// FNV-1a digest identifying the checkpoint a separation came from.
fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

fn check_analysis(ckpt: &RunConfig, requested: &RunConfig) -> Result<()> {
    for (name, a, b) in [("n_fft", requested.n_fft, ckpt.n_fft), ("hop", requested.hop, ckpt.hop)] {
        if a != b {
            return Err(Error::InvalidArgument(format!("{name} mismatch: config has {a}, checkpoint was trained with {b}")));
        }
    }
    if requested.sample_rate != ckpt.sample_rate || requested.floor != ckpt.floor {
        return Err(Error::InvalidArgument(format!(
            "analysis mismatch: config sample_rate {} floor {:?}, checkpoint sample_rate {} floor {:?}",
            requested.sample_rate, requested.floor, ckpt.sample_rate, ckpt.floor
        )));
    }
    Ok(())
}

fn separate(ckpt_path: &Path, mixture: &Path, mode: MaskMode, out_dir: &Path, config: Option<&Path>, spectrograms: bool) -> Result<()> {
    let bytes = fs::read(ckpt_path)?;
    let ckpt = crate::io::checkpoint::decode_checkpoint(&bytes)?;
    if let Some(p) = config {
        check_analysis(&ckpt.config, &RunConfig::load(p)?)?;
    }
    let cfg = &ckpt.config;
    log_config(cfg);
    let m = read_mixture(mixture, cfg.sample_rate)?;
    let (spec, frames) = checkpoint_frames(&ckpt, &m.samples)?;
    let assignment = assign_frames(&ckpt.model, &frames, cfg.clusters, cfg.restarts, cfg.seed, mode)?;
    let id = digest(&bytes);
    let sep = reconstruct(&spec, &ckpt.model, &assignment, &ckpt.stats, &id)?;

    ensure_dir(out_dir)?;
    for (i, signal) in sep.signals.iter().enumerate() {
        let clipped = signal.iter().filter(|v| v.abs() > 1.0).count();
        if clipped > 0 {
            eprintln!("vaesep: separate: source {i}: clipped {clipped} samples to [-1, 1]");
        }
        let samples: Vec<f64> = signal.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        write_wav(&out_dir.join(format!("source_{i}.wav")), &samples, sep.sample_rate, cfg.wav_encoding)?;
        if spectrograms {
            let s = stft(&samples, sep.sample_rate, cfg.n_fft, cfg.hop)?;
            export_csv(&CsvData::Spectrogram(&s), &out_dir.join(format!("source_{i}_spectrogram.csv")))?;
        }
    }
    if spectrograms {
        export_csv(&CsvData::Spectrogram(&spec), &out_dir.join("mixture_spectrogram.csv"))?;
    }
    export_csv(&CsvData::Masks { ids: &assignment.ids, masks: &sep.masks }, &out_dir.join("masks.csv"))?;
    eprintln!(
        "vaesep: separate: {} sources, mode {}, checkpoint {}",
        sep.signals.len(),
        sep.provenance.mode,
        sep.provenance.checkpoint_id
    );
    Ok(())
}

fn wav_files(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "wav") && p.file_name().and_then(|n| n.to_str()).is_some_and(&keep)
        })
        .collect();
    out.sort();
    Ok(out)
}

fn source_index(p: &Path) -> Option<usize> {
    p.file_stem()?.to_str()?.strip_prefix("source_")?.parse().ok()
}

fn eval(cfg: &RunConfig, est_dir: &Path, ref_dir: &Path, mixture: &Path, out: &Path) -> Result<()> {
    log_config(cfg);
    let mut est_paths = wav_files(est_dir, |n| n.starts_with("source_"))?;
    est_paths.sort_by_key(|p| source_index(p));
    let ref_paths = wav_files(ref_dir, |n| n != "mixture.wav")?;
    if est_paths.is_empty() || ref_paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "found {} estimates in {} and {} references in {}",
            est_paths.len(),
            est_dir.display(),
            ref_paths.len(),
            ref_dir.display()
        )));
    }
    let load = |paths: &[PathBuf]| paths.iter().map(|p| read_wav(p).map(|s| s.samples)).collect::<Result<Vec<_>>>();
    let estimates = load(&est_paths)?;
    let references = load(&ref_paths)?;
    let mix = read_wav(mixture)?.samples;
    let mut report = evaluate(&estimates, &references, &mix, cfg.n_fft, cfg.hop)?;

    let (labels, masks) = (ref_dir.join("labels.csv"), est_dir.join("masks.csv"));
    if labels.exists() && masks.exists() {
        let truth = read_usize_column(&labels, "label")?;
        let clusters = read_usize_column(&masks, "cluster")?;
        let n = truth.len().min(clusters.len());
        if n > 0 {
            report.purity = Some(purity(&clusters[..n], &truth[..n])?);
        }
    }
    export_csv(&CsvData::Report(&report), out)?;
    for (s, p) in report.scores.iter().zip(&ref_paths) {
        eprintln!(
            "vaesep: evaluate: {} <- source_{}: SI-SDR {:.2} dB (improvement {:.2} dB), LSD {:.2} dB",
            p.file_name().unwrap_or_default().to_string_lossy(),
            s.estimate,
            s.si_sdr,
            s.si_sdr_improvement,
            s.lsd
        );
    }
    Ok(())
}
