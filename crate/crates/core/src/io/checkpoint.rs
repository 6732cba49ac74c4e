//! Single-file model checkpoints.
//!
//! Layout: a text header of newline-terminated lines, then the raw
//! little-endian `f64` blocks in header order.
//!
//! ```text
//! vaesep-checkpoint 1
//! epoch 200
//! seed 7
//! config n_fft 256
//! ...
//! arch 129 8 64,32 tanh
//! block enc.0.weight 129 64
//! ...
//! block stats.std 1 129
//! end
//! <binary>
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::write_atomic;
use crate::dsp::FeatureStats;
use crate::error::{Error, Result};
use crate::nngrad::Activation;
use crate::vae::{Architecture, VaeModel};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "vaesep-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VaeModel,
    pub stats: FeatureStats,
    pub config: RunConfig,
    pub epoch: usize,
}

struct Block {
    name: String,
    rows: usize,
    cols: usize,
}

fn model_blocks(model: &VaeModel) -> Vec<Block> {
    let mut out = Vec::new();
    for set in [&model.encoder, &model.decoder] {
        for (name, layer) in set.layers() {
            out.push(Block { name: format!("{name}.weight"), rows: layer.inputs(), cols: layer.outputs() });
            out.push(Block { name: format!("{name}.bias"), rows: 1, cols: layer.outputs() });
        }
    }
    out
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let Checkpoint { model, stats, config, epoch } = ckpt;
    if stats.dim() != model.input_dim() || stats.std.len() != stats.dim() {
        return Err(Error::InvalidArgument(format!(
            "feature stats have {} bins, model input has {}",
            stats.dim(),
            model.input_dim()
        )));
    }
    if config.architecture() != model.arch || config.beta != model.beta {
        return Err(Error::InvalidArgument("config does not describe the model being saved".into()));
    }
    let arch = &model.arch;
    let hidden = arch.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
    let mut header = format!("{MAGIC} {CHECKPOINT_VERSION}\nepoch {epoch}\nseed {}\n", config.seed);
    for (k, v) in config.pairs() {
        header.push_str(&format!("config {k} {v}\n"));
    }
    header.push_str(&format!(
        "arch {} {} {} {}\n",
        arch.input_dim,
        arch.latent_dim,
        if hidden.is_empty() { "-".into() } else { hidden },
        arch.hidden_activation.name()
    ));
    let mut blocks = model_blocks(model);
    blocks.push(Block { name: "stats.mean".into(), rows: 1, cols: stats.dim() });
    blocks.push(Block { name: "stats.std".into(), rows: 1, cols: stats.dim() });
    for b in &blocks {
        header.push_str(&format!("block {} {} {}\n", b.name, b.rows, b.cols));
    }
    header.push_str("end\n");

    let mut out = header.into_bytes();
    let values = model.to_flat().into_iter().chain(stats.mean.iter().copied()).chain(stats.std.iter().copied());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

fn field<T: std::str::FromStr>(parts: &[&str], i: usize, line: &str) -> Result<T> {
    parts
        .get(i)
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| corrupt(format!("malformed header line '{line}'")))
}

/// Parses a checkpoint. Nothing is returned unless every block is present
/// with exactly the declared size.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("header ends early"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("header is not text"))
    };

    let first = next_line()?;
    let version = match first.split_once(' ') {
        Some((MAGIC, v)) => v.parse::<u32>().map_err(|_| corrupt(format!("bad version field '{v}'")))?,
        _ => return Err(corrupt("not a checkpoint file")),
    };
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, supported: CHECKPOINT_VERSION });
    }

    let mut epoch = None;
    let mut seed = None;
    let mut config = RunConfig::default();
    let mut arch = None;
    let mut blocks = Vec::new();
    loop {
        let line = next_line()?;
        let parts: Vec<&str> = line.split(' ').collect();
        match parts[0] {
            "end" => break,
            "epoch" => epoch = Some(field::<usize>(&parts, 1, line)?),
            "seed" => seed = Some(field::<u64>(&parts, 1, line)?),
            "config" if parts.len() == 3 => {
                config.set(parts[1], parts[2]).map_err(|e| corrupt(format!("config entry: {e}")))?
            }
            "arch" if parts.len() == 5 => {
                let hidden = if parts[3] == "-" {
                    Vec::new()
                } else {
                    parts[3]
                        .split(',')
                        .map(|h| h.parse().map_err(|_| corrupt(format!("bad hidden sizes '{}'", parts[3]))))
                        .collect::<Result<Vec<usize>>>()?
                };
                let mut a = Architecture::new(field(&parts, 1, line)?, field(&parts, 2, line)?, hidden);
                a.hidden_activation = Activation::parse(parts[4]).map_err(|e| corrupt(e.to_string()))?;
                arch = Some(a);
            }
            "block" if parts.len() == 4 => blocks.push(Block {
                name: parts[1].to_string(),
                rows: field(&parts, 2, line)?,
                cols: field(&parts, 3, line)?,
            }),
            _ => return Err(corrupt(format!("unexpected header line '{line}'"))),
        }
    }
    let epoch = epoch.ok_or_else(|| corrupt("missing epoch"))?;
    let seed = seed.ok_or_else(|| corrupt("missing seed"))?;
    let arch = arch.ok_or_else(|| corrupt("missing architecture"))?;
    config.validate().map_err(|e| corrupt(format!("stored config: {e}")))?;
    if seed != config.seed || config.architecture() != arch {
        return Err(corrupt("stored config disagrees with the architecture or seed lines"));
    }

    let mut model = VaeModel::new(arch, config.beta, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| corrupt(format!("architecture: {e}")))?;
    let mut expected = model_blocks(&model);
    let n = model.input_dim();
    expected.push(Block { name: "stats.mean".into(), rows: 1, cols: n });
    expected.push(Block { name: "stats.std".into(), rows: 1, cols: n });
    if blocks.len() != expected.len() {
        return Err(corrupt(format!("{} blocks declared, architecture needs {}", blocks.len(), expected.len())));
    }
    for (got, want) in blocks.iter().zip(&expected) {
        if got.name != want.name || got.rows != want.rows || got.cols != want.cols {
            return Err(corrupt(format!(
                "block {} {}x{} does not match expected {} {}x{}",
                got.name, got.rows, got.cols, want.name, want.rows, want.cols
            )));
        }
    }

    let body = &bytes[pos..];
    let count: usize = expected.iter().map(|b| b.rows * b.cols).sum();
    if body.len() != count * 8 {
        return Err(corrupt(format!("expected {} bytes of parameters, found {}", count * 8, body.len())));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter value"));
    }
    let p = model.to_flat().len();
    model.set_flat(&values[..p]).map_err(|e| corrupt(e.to_string()))?;
    let stats = FeatureStats { mean: values[p..p + n].to_vec(), std: values[p + n..].to_vec() };
    if stats.std.iter().any(|&s| s <= 0.0) {
        return Err(corrupt("feature std must be positive"));
    }
    Ok(Checkpoint { model, stats, config, epoch })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngrad::Matrix;
    use rand::Rng;

    fn sample(seed: u64) -> Checkpoint {
        let config = RunConfig { seed, latent_dim: 3, hidden: vec![16, 8], n_fft: 32, hop: 8, ..RunConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = VaeModel::new(config.architecture(), config.beta, &mut rng).unwrap();
        let n = model.input_dim();
        let stats = FeatureStats {
            mean: (0..n).map(|_| rng.gen_range(-5.0..0.0)).collect(),
            std: (0..n).map(|_| rng.gen_range(0.1..2.0)).collect(),
        };
        Checkpoint { model, stats, config, epoch: 42 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample(3);
        let back = decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let x = Matrix::from_rows(&[c.stats.mean.clone()]).unwrap();
        let (a, b) = (c.model.encode_batch(&x).unwrap(), back.model.encode_batch(&x).unwrap());
        assert_eq!(a, b);
        assert_eq!(c.model.decode_batch(&a.0).unwrap(), back.model.decode_batch(&b.0).unwrap());
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(encode_checkpoint(&sample(1)).unwrap(), encode_checkpoint(&sample(1)).unwrap());
    }

    #[test]
    fn truncation_and_trailing_bytes_are_corruption() {
        let bytes = encode_checkpoint(&sample(2)).unwrap();
        for cut in [0, 10, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_checkpoint(&longer), Err(Error::Corrupt(_))));
    }

    #[test]
    fn future_version_names_both() {
        let bytes = encode_checkpoint(&sample(2)).unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("vaesep-checkpoint 1", "vaesep-checkpoint 9", 1);
        let mut future = text.as_bytes()[..20].to_vec();
        future.extend_from_slice(&bytes[20..]);
        match decode_checkpoint(&future) {
            Err(e @ Error::Version { found: 9, supported: 1 }) => {
                let m = e.to_string();
                assert!(m.contains('9') && m.contains('1'), "{m}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn block_shape_mismatch_is_corruption() {
        let bytes = encode_checkpoint(&sample(2)).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let header_end = text.find("end\n").unwrap();
        let edited = text[..header_end].replacen("block enc.0.bias 1 16", "block enc.0.bias 1 17", 1);
        let mut b = edited.into_bytes();
        b.extend_from_slice(&bytes[header_end..]);
        assert!(matches!(decode_checkpoint(&b), Err(Error::Corrupt(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = sample(5);
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
        assert!(matches!(load_checkpoint(&dir.path().join("x")), Err(Error::Io(_))));
    }
}
