//! CSV exports. Floats carry 9 significant digits in exponent notation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::write_atomic;
use crate::dsp::ComplexSpectrogram;
use crate::error::{invalid, Error, Result};
use crate::nngrad::Matrix;
use crate::separate::{SeparationReport, SourceMasks};
use crate::vae::LossBreakdown;

/// Spectrogram magnitudes below this are written at its level.
pub const DB_FLOOR: f64 = 1e-5;

/// One projected frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub frame_index: usize,
    pub x: f64,
    pub y: f64,
    pub cluster: usize,
    pub true_label: Option<usize>,
    pub epoch: usize,
}

pub enum CsvData<'a> {
    Losses(&'a [LossBreakdown]),
    Embedding(&'a [EmbeddingRow]),
    Spectrogram(&'a ComplexSpectrogram),
    Report(&'a SeparationReport),
    /// Per-frame ground-truth label.
    Labels(&'a [usize]),
    /// Per-frame cluster and per-source mean mask value.
    Masks { ids: &'a [usize], masks: &'a SourceMasks },
    /// Posterior means of every frame at one epoch.
    Latent { epoch: usize, frame_indices: &'a [usize], means: &'a Matrix },
}

/// `inf`/`-inf` pass through (SI-SDR sentinels); NaN is refused.
pub fn fmt_float(v: f64) -> Result<String> {
    if v.is_nan() {
        Err(invalid("refusing to write NaN to CSV"))
    } else if v.is_infinite() {
        Ok(if v > 0.0 { "inf".into() } else { "-inf".into() })
    } else {
        Ok(format!("{v:.8e}"))
    }
}

fn line(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

pub fn render(data: &CsvData) -> Result<String> {
    let mut out = String::new();
    match data {
        CsvData::Losses(history) => {
            out.push_str("epoch,recon,kl,total\n");
            for (i, l) in history.iter().enumerate() {
                line(&mut out, &[(i + 1).to_string(), fmt_float(l.recon)?, fmt_float(l.kl)?, fmt_float(l.total)?]);
            }
        }
        CsvData::Embedding(rows) => {
            out.push_str("frame_index,x,y,cluster,true_label,epoch\n");
            for r in rows.iter() {
                line(
                    &mut out,
                    &[
                        r.frame_index.to_string(),
                        fmt_float(r.x)?,
                        fmt_float(r.y)?,
                        r.cluster.to_string(),
                        r.true_label.map(|l| l.to_string()).unwrap_or_default(),
                        r.epoch.to_string(),
                    ],
                );
            }
        }
        CsvData::Spectrogram(spec) => {
            out.push_str("frame,bin,magnitude_db\n");
            for t in 0..spec.frames() {
                for (b, c) in spec.frame(t).iter().enumerate() {
                    let db = 20.0 * c.norm().max(DB_FLOOR).log10();
                    let _ = writeln!(out, "{t},{b},{}", fmt_float(db)?);
                }
            }
        }
        CsvData::Report(report) => {
            out.push_str(
                "reference,estimate,si_sdr_db,si_sdr_mixture_db,si_sdr_improvement_db,lsd_db,purity,permutations_evaluated,mode\n",
            );
            let purity = report.purity.map(fmt_float).transpose()?.unwrap_or_default();
            let mode = report.mode.map(|m| m.to_string()).unwrap_or_default();
            for s in &report.scores {
                line(
                    &mut out,
                    &[
                        s.reference.to_string(),
                        s.estimate.to_string(),
                        fmt_float(s.si_sdr)?,
                        fmt_float(s.si_sdr_mixture)?,
                        fmt_float(s.si_sdr_improvement)?,
                        fmt_float(s.lsd)?,
                        purity.clone(),
                        report.permutations_evaluated.to_string(),
                        mode.clone(),
                    ],
                );
            }
        }
        CsvData::Labels(labels) => {
            out.push_str("frame,label\n");
            for (t, l) in labels.iter().enumerate() {
                let _ = writeln!(out, "{t},{l}");
            }
        }
        CsvData::Masks { ids, masks } => {
            if ids.len() != masks.frames {
                return Err(invalid(format!("{} frame ids for {} mask frames", ids.len(), masks.frames)));
            }
            let mut header = vec!["frame".to_string(), "cluster".to_string()];
            header.extend((0..masks.sources).map(|s| format!("mask_mean_{s}")));
            line(&mut out, &header);
            for (t, id) in ids.iter().enumerate() {
                let mut fields = vec![t.to_string(), id.to_string()];
                for s in 0..masks.sources {
                    fields.push(fmt_float(masks.frame_mean(s, t))?);
                }
                line(&mut out, &fields);
            }
        }
        CsvData::Latent { epoch, frame_indices, means } => {
            if frame_indices.len() != means.rows() {
                return Err(invalid(format!("{} frame indices for {} rows", frame_indices.len(), means.rows())));
            }
            let mut header = vec!["frame_index".to_string(), "epoch".to_string()];
            header.extend((0..means.cols()).map(|j| format!("mu_{j}")));
            line(&mut out, &header);
            for (r, f) in frame_indices.iter().enumerate() {
                let mut fields = vec![f.to_string(), epoch.to_string()];
                for &v in means.row(r) {
                    fields.push(fmt_float(v)?);
                }
                line(&mut out, &fields);
            }
        }
    }
    Ok(out)
}

pub fn export_csv(data: &CsvData, path: &Path) -> Result<()> {
    write_atomic(path, render(data)?.as_bytes())
}

/// Header and records of a CSV file written by this module (no quoting).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse { offset: 0, message: format!("{} is empty", path.display()) })?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

/// Integer column `name` of a CSV file.
pub fn read_usize_column(path: &Path, name: &str) -> Result<Vec<usize>> {
    let (header, rows) = read_csv(path)?;
    let col = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| invalid(format!("{} has no '{name}' column", path.display())))?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            r.get(col)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| invalid(format!("{} line {}: bad '{name}' value", path.display(), i + 2)))
        })
        .collect()
}
