use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

/// Reads 16-bit PCM or 32-bit float WAV, averaging stereo to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let fail = |reason: String| Error::AudioLoad {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = WavReader::open(path).map_err(|e| fail(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(fail(format!("{channels} channels; only mono or stereo is supported")));
    }
    let expected = reader.len() as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => return Err(fail(format!("unsupported encoding {fmt:?} {bits}-bit"))),
    }
    .map_err(|e| fail(e.to_string()))?;
    if interleaved.len() != expected {
        return Err(fail(format!("truncated data: {} of {expected} samples", interleaved.len())));
    }
    let samples = interleaved
        .chunks(channels)
        .map(|f| f.iter().sum::<f64>() / channels as f64)
        .collect::<Vec<_>>();
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(fail("non-finite sample".into()));
    }
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes mono 16-bit PCM. Samples are clamped to the representable range.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    };
    let mut w = WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(to_io)?;
    }
    w.finalize().map_err(to_io)
}
