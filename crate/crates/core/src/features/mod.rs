//! Audio loading and the log-mel input representation.

mod cache;
mod mel;
mod wav;

pub use cache::{read_spectrogram, write_spectrogram, SPEC_MAGIC, SPEC_VERSION};
pub use mel::{frame_count, logmel, mel_filterbank, FrameParams, HOP_SECONDS, LOG_FLOOR, N_MELS, WINDOW_SECONDS};
pub use wav::{load_wav, write_wav};

use crate::tensor::Tensor;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Self {
        let n = (seconds * sample_rate as f64).round() as usize;
        Self::new(vec![0.0; n], sample_rate)
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub(crate) fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// `T × D` log-mel energies. Frame `t` covers
/// `[t·hop_seconds, t·hop_seconds + window_seconds)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<f64>,
    n_frames: usize,
    n_mels: usize,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl Spectrogram {
    pub fn new(data: Vec<f64>, n_frames: usize, n_mels: usize, hop_seconds: f64, window_seconds: f64) -> Self {
        assert_eq!(data.len(), n_frames * n_mels, "spectrogram size mismatch");
        Self {
            data,
            n_frames,
            n_mels,
            hop_seconds,
            window_seconds,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Frames `start..start+len`, repeating the final frame past the end.
    pub fn window_padded(&self, start: usize, len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(len * self.n_mels);
        for t in start..start + len {
            out.extend_from_slice(self.frame(t.min(self.n_frames - 1)));
        }
        out
    }

    /// As a `[1, T, D]` tensor (one input channel).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.n_frames, self.n_mels], self.data.clone())
    }
}
