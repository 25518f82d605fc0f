//! Binary spectrogram cache.
//!
//! Layout (little-endian): magic `MTFASPEC`, version `u32`, `T u32`, `D u32`,
//! `hop_seconds f64`, then `T·D` `f32` values row-major.

use std::io::{Read, Write};
use std::path::Path;

use super::Spectrogram;
use crate::error::{Error, Result};

pub const SPEC_MAGIC: &[u8; 8] = b"MTFASPEC";
pub const SPEC_VERSION: u32 = 1;

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "spectrogram cache",
        detail: detail.into(),
    }
}

pub fn write_spectrogram(path: impl AsRef<Path>, spec: &Spectrogram) -> Result<()> {
    let mut buf = Vec::with_capacity(28 + spec.data().len() * 4);
    buf.extend_from_slice(SPEC_MAGIC);
    buf.extend_from_slice(&SPEC_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.n_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.n_mels() as u32).to_le_bytes());
    buf.extend_from_slice(&spec.hop_seconds.to_le_bytes());
    for &v in spec.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a cache written by [`write_spectrogram`]. The window length is
/// taken as twice the hop.
pub fn read_spectrogram(path: impl AsRef<Path>) -> Result<Spectrogram> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 28 || &bytes[..8] != SPEC_MAGIC {
        return Err(format_err("missing MTFASPEC magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != SPEC_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let (t, d) = (u32_at(12) as usize, u32_at(16) as usize);
    let hop = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let body = &bytes[28..];
    if t == 0 || d == 0 || body.len() != t * d * 4 {
        return Err(format_err(format!(
            "header says {t}×{d} but payload holds {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Spectrogram::new(data, t, d, hop, 2.0 * hop))
}
