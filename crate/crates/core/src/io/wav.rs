//! Mono RIFF/WAVE reading and writing, 16-bit PCM or 32-bit IEEE float.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::write_atomic;
use crate::error::{invalid, Error, Result};
use crate::siggen::{SourceKind, SourceSignal};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;
const PCM_SCALE: f64 = 32768.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

impl WavEncoding {
    fn bytes_per_sample(self) -> usize {
        match self {
            WavEncoding::Pcm16 => 2,
            WavEncoding::Float32 => 4,
        }
    }
}

impl fmt::Display for WavEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WavEncoding::Pcm16 => "pcm16",
            WavEncoding::Float32 => "float32",
        })
    }
}

impl FromStr for WavEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcm16" => Ok(WavEncoding::Pcm16),
            "float32" => Ok(WavEncoding::Float32),
            _ => Err(Error::UnsupportedFormat(format!("unknown WAV encoding '{s}' (expected pcm16 or float32)"))),
        }
    }
}

fn quantize(x: f64) -> i16 {
    (x * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

/// Serialises mono samples in `[-1, 1]` as a complete WAV file.
pub fn encode_wav(samples: &[f64], sample_rate: u32, encoding: WavEncoding) -> Result<Vec<u8>> {
    if sample_rate == 0 {
        return Err(invalid("sample_rate must be positive"));
    }
    if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
        return Err(invalid(format!("sample {i} = {} is outside [-1, 1]", samples[i])));
    }
    let width = encoding.bytes_per_sample();
    let data_len = samples.len() * width;
    if data_len > (u32::MAX as usize) - 64 {
        return Err(invalid(format!("{} samples do not fit in a WAV file", samples.len())));
    }
    let (tag, fmt_len) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 16u32),
        WavEncoding::Float32 => (FORMAT_FLOAT, 18u32),
    };
    // Float files carry cbSize and a fact chunk, as the format requires for
    // non-PCM data.
    let fact_len = if encoding == WavEncoding::Float32 { 12 } else { 0 };
    let riff_len = 4 + (8 + fmt_len as usize) + fact_len + 8 + data_len + data_len % 2;

    let mut out = Vec::with_capacity(8 + riff_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(riff_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&fmt_len.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * width as u32).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&(8 * width as u16).to_le_bytes());
    if encoding == WavEncoding::Float32 {
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(b"fact");
        out.extend_from_slice(&4u32.to_le_bytes());
        out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    }
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        match encoding {
            WavEncoding::Pcm16 => out.extend_from_slice(&quantize(s).to_le_bytes()),
            WavEncoding::Float32 => out.extend_from_slice(&(s as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32, encoding: WavEncoding) -> Result<()> {
    write_atomic(path, &encode_wav(samples, sample_rate, encoding)?)
}

/// Decoded WAV contents.
#[derive(Debug, Clone, PartialEq)]
pub struct WavData {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub encoding: WavEncoding,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!("file ends while reading {what} ({n} bytes needed at byte {})", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

struct Format {
    encoding: WavEncoding,
    sample_rate: u32,
}

fn parse_fmt(chunk: &[u8], offset: usize) -> Result<Format> {
    let mut r = Reader { bytes: chunk, pos: 0 };
    let parse_err = |e: Error| match e {
        Error::Parse { message, .. } => Error::Parse { offset: (offset + chunk.len()) as u64, message: format!("fmt chunk: {message}") },
        other => other,
    };
    let mut tag = r.u16("format tag").map_err(parse_err)?;
    let channels = r.u16("channel count").map_err(parse_err)?;
    let sample_rate = r.u32("sample rate").map_err(parse_err)?;
    let _byte_rate = r.u32("byte rate").map_err(parse_err)?;
    let block_align = r.u16("block align").map_err(parse_err)?;
    let bits = r.u16("bits per sample").map_err(parse_err)?;
    if tag == FORMAT_EXTENSIBLE {
        let _cb = r.u16("extension size").map_err(parse_err)?;
        let _valid = r.u16("valid bits").map_err(parse_err)?;
        let _mask = r.u32("channel mask").map_err(parse_err)?;
        tag = r.u16("sub-format").map_err(parse_err)?;
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels; only mono WAV is supported")));
    }
    if sample_rate == 0 {
        return Err(Error::Parse { offset: (offset + 4) as u64, message: "sample rate is zero".into() });
    }
    let encoding = match (tag, bits) {
        (FORMAT_PCM, 16) => WavEncoding::Pcm16,
        (FORMAT_FLOAT, 32) => WavEncoding::Float32,
        _ => {
            return Err(Error::UnsupportedFormat(format!(
                "format tag {tag} with {bits} bits per sample (supported: 16-bit PCM, 32-bit float)"
            )))
        }
    };
    if block_align as usize != encoding.bytes_per_sample() {
        return Err(Error::Parse {
            offset: (offset + 12) as u64,
            message: format!("block align {block_align} does not match {bits}-bit mono"),
        });
    }
    Ok(Format { encoding, sample_rate })
}

pub fn decode_wav(bytes: &[u8]) -> Result<WavData> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "RIFF tag")? != b"RIFF" {
        return Err(Error::Parse { offset: 0, message: "missing RIFF tag".into() });
    }
    let _riff_len = r.u32("RIFF size")?;
    if r.take(4, "WAVE tag")? != b"WAVE" {
        return Err(Error::Parse { offset: 8, message: "missing WAVE tag".into() });
    }
    let mut format: Option<Format> = None;
    loop {
        let id: [u8; 4] = r.take(4, "chunk id")?.try_into().unwrap();
        let len = r.u32("chunk size")? as usize;
        let start = r.pos;
        match &id {
            b"fmt " => {
                format = Some(parse_fmt(r.take(len, "fmt chunk")?, start)?);
            }
            b"data" => {
                let fmt = format.ok_or_else(|| Error::Parse {
                    offset: (start - 8) as u64,
                    message: "data chunk before fmt chunk".into(),
                })?;
                let width = fmt.encoding.bytes_per_sample();
                if len % width != 0 {
                    return Err(Error::Parse {
                        offset: (start - 4) as u64,
                        message: format!("data size {len} is not a multiple of {width}"),
                    });
                }
                let data = r.take(len, "sample data")?;
                let samples = match fmt.encoding {
                    WavEncoding::Pcm16 => data
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / PCM_SCALE)
                        .collect(),
                    WavEncoding::Float32 => data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect(),
                };
                return Ok(WavData { samples, sample_rate: fmt.sample_rate, encoding: fmt.encoding });
            }
            _ => {
                r.take(len + len % 2, "chunk body")?;
            }
        }
        if len % 2 == 1 && id == *b"fmt " {
            r.take(1, "chunk padding")?;
        }
    }
}

/// Reads a mono WAV file as a signal of unknown kind.
pub fn read_wav(path: &Path) -> Result<SourceSignal> {
    let d = decode_wav(&fs::read(path)?)?;
    SourceSignal::new(d.samples, d.sample_rate, SourceKind::Other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        v.extend([-1.0, 1.0, 0.0]);
        v
    }

    #[test]
    fn float32_round_trip_is_exact() {
        let x = random(1000, 1);
        let d = decode_wav(&encode_wav(&x, 4000, WavEncoding::Float32).unwrap()).unwrap();
        assert_eq!(d.sample_rate, 4000);
        assert_eq!(d.encoding, WavEncoding::Float32);
        let expect: Vec<f64> = x.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(d.samples, expect);
        // Re-encoding the decoded samples reproduces the file byte for byte.
        let once = encode_wav(&d.samples, 4000, WavEncoding::Float32).unwrap();
        let twice = encode_wav(&decode_wav(&once).unwrap().samples, 4000, WavEncoding::Float32).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn pcm16_round_trip_within_one_step() {
        let x = random(1000, 2);
        let d = decode_wav(&encode_wav(&x, 8000, WavEncoding::Pcm16).unwrap()).unwrap();
        assert_eq!(d.sample_rate, 8000);
        for (a, b) in x.iter().zip(&d.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn header_fields_follow_the_riff_layout() {
        let bytes = encode_wav(&[0.5, -0.5], 4000, WavEncoding::Pcm16).unwrap();
        assert_eq!(bytes.len(), 44 + 4);
        assert_eq!(&bytes[0..4], b"RIFF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 40);
        assert_eq!(u16::from_le_bytes(bytes[22..24].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 4000);
        assert_eq!(i16::from_le_bytes(bytes[44..46].try_into().unwrap()), 16384);
    }

    fn with_channels(mut bytes: Vec<u8>, channels: u16) -> Vec<u8> {
        bytes[22..24].copy_from_slice(&channels.to_le_bytes());
        bytes
    }

    #[test]
    fn stereo_is_rejected_with_channel_count() {
        let bytes = with_channels(encode_wav(&[0.0; 8], 4000, WavEncoding::Pcm16).unwrap(), 2);
        match decode_wav(&bytes) {
            Err(Error::UnsupportedFormat(m)) => assert!(m.contains('2'), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let bytes = encode_wav(&[0.1; 100], 4000, WavEncoding::Pcm16).unwrap();
        for cut in [0, 10, 30, 50, bytes.len() - 1] {
            match decode_wav(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_encodings_are_unsupported() {
        let mut bytes = encode_wav(&[0.0; 4], 4000, WavEncoding::Pcm16).unwrap();
        bytes[34..36].copy_from_slice(&24u16.to_le_bytes());
        assert!(matches!(decode_wav(&bytes), Err(Error::UnsupportedFormat(_))));
        assert!(matches!("mp3".parse::<WavEncoding>(), Err(Error::UnsupportedFormat(_))));
        assert_eq!("pcm16".parse::<WavEncoding>().unwrap(), WavEncoding::Pcm16);
    }

    #[test]
    fn extensible_and_extra_chunks_are_accepted() {
        // fmt as WAVE_FORMAT_EXTENSIBLE with a float sub-format, plus a LIST chunk.
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF\0\0\0\0WAVE");
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(b"abc\0");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&40u32.to_le_bytes());
        b.extend_from_slice(&FORMAT_EXTENSIBLE.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&2000u32.to_le_bytes());
        b.extend_from_slice(&8000u32.to_le_bytes());
        b.extend_from_slice(&4u16.to_le_bytes());
        b.extend_from_slice(&32u16.to_le_bytes());
        b.extend_from_slice(&22u16.to_le_bytes());
        b.extend_from_slice(&32u16.to_le_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&FORMAT_FLOAT.to_le_bytes());
        b.extend_from_slice(&[0u8; 14]);
        b.extend_from_slice(b"data");
        b.extend_from_slice(&8u32.to_le_bytes());
        b.extend_from_slice(&0.25f32.to_le_bytes());
        b.extend_from_slice(&(-0.5f32).to_le_bytes());
        let d = decode_wav(&b).unwrap();
        assert_eq!(d.samples, vec![0.25, -0.5]);
        assert_eq!(d.sample_rate, 2000);
    }

    #[test]
    fn out_of_range_samples_are_rejected() {
        assert!(encode_wav(&[1.5], 4000, WavEncoding::Float32).is_err());
        assert!(encode_wav(&[f64::NAN], 4000, WavEncoding::Pcm16).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let x = random(100, 3);
        write_wav(&p, &x, 4000, WavEncoding::Float32).unwrap();
        let s = read_wav(&p).unwrap();
        assert_eq!(s.sample_rate, 4000);
        assert_eq!(s.samples.len(), x.len());
        assert!(matches!(read_wav(&dir.path().join("none.wav")), Err(Error::Io(_))));
    }
}
